//! Progressive-conditioning stages, the stage-1 unlock milestones and the
//! learning-rate tail.

use serde::{Deserialize, Serialize};

use crate::model::Conditioning;

pub const NUM_STAGES: usize = 4;

/// Iterations into stage 1 at which deformation, then scale, unlock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestones {
    pub deform: usize,
    pub scale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEvent {
    DeformUnlocked,
    ScaleUnlocked,
    Advanced(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageScheduler {
    pub budgets: [usize; NUM_STAGES],
    pub milestones: Milestones,
    /// Iterations at the very end of stage 4 run with the rate divided by 5.
    pub lr_tail: usize,
    stage: usize,
    in_stage: usize,
}

impl StageScheduler {
    pub fn new(budgets: [usize; NUM_STAGES], milestones: Milestones, lr_tail: usize) -> Self {
        StageScheduler {
            budgets,
            milestones,
            lr_tail,
            stage: 1,
            in_stage: 0,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Iterations done in the current stage.
    pub fn in_stage(&self) -> usize {
        self.in_stage
    }

    pub fn total_budget(&self) -> usize {
        self.budgets.iter().sum()
    }

    pub fn finished(&self) -> bool {
        self.stage == NUM_STAGES && self.in_stage >= self.budgets[NUM_STAGES - 1]
    }

    pub fn conditioning(&self) -> Conditioning {
        if self.stage > 1 {
            return Conditioning::full(self.stage);
        }
        Conditioning {
            stage: 1,
            deform_enabled: self.in_stage >= self.milestones.deform,
            scale_enabled: self.in_stage >= self.milestones.scale,
        }
    }

    pub fn lr(&self, base: f64) -> f64 {
        let last = self.budgets[NUM_STAGES - 1];
        if self.stage == NUM_STAGES && self.in_stage + self.lr_tail >= last {
            base / 5.0
        } else {
            base
        }
    }

    /// Moves to the next stage; past the last stage nothing changes.
    pub fn advance_stage(&mut self) -> usize {
        if self.stage == NUM_STAGES {
            log::warn!("already in the last stage, not advancing");
        } else {
            self.stage += 1;
            self.in_stage = 0;
        }
        self.stage
    }

    /// Counts one iteration and reports what unlocked. Stages advance once
    /// their budget is used up.
    pub fn tick(&mut self) -> Vec<StageEvent> {
        let mut events = Vec::new();
        let before = self.conditioning();
        self.in_stage += 1;
        let advance = self.stage < NUM_STAGES && self.in_stage >= self.budgets[self.stage - 1];
        let after = if advance {
            Conditioning::full(self.stage + 1)
        } else {
            self.conditioning()
        };
        if after.deform_enabled && !before.deform_enabled {
            events.push(StageEvent::DeformUnlocked);
        }
        if after.scale_enabled && !before.scale_enabled {
            events.push(StageEvent::ScaleUnlocked);
        }
        if advance {
            events.push(StageEvent::Advanced(self.advance_stage()));
        }
        events
    }

    /// Restores a saved position.
    pub fn seek(&mut self, stage: usize, in_stage: usize) {
        self.stage = stage.clamp(1, NUM_STAGES);
        self.in_stage = in_stage;
    }
}
