//! Euler angles with world vertical axis y:
//! `rot(r) = R_roll(z) · R_elev(x) · R_azim(y)`.
//!
//! Positive elevation tilts the object's top towards the camera (the view
//! from above); positive azimuth turns +x towards -z.

use softmesh_tensor::{Array, Tape, Var};

use crate::error::Result;

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[j][i]))
}

pub fn azimuth_matrix(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn elevation_matrix(e: f64) -> Mat3 {
    let (s, c) = e.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]]
}

pub fn roll_matrix(r: f64) -> Mat3 {
    let (s, c) = r.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation for (azimuth, elevation, roll) in radians.
pub fn euler_matrix(azimuth: f64, elevation: f64, roll: f64) -> Mat3 {
    mat_mul(&roll_matrix(roll), &mat_mul(&elevation_matrix(elevation), &azimuth_matrix(azimuth)))
}

/// Geodesic distance on SO(3), in radians.
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    let tr: f64 = (0..3).map(|i| (0..3).map(|k| a[k][i] * b[k][i]).sum::<f64>()).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Rotation about a unit axis (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn rot_from_parts(tape: &mut Tape, angle: Var, pattern: [[i8; 3]; 3]) -> Result<Var> {
    // pattern entries: 0 zero, 1 one, 2 cos, 3 sin, -3 -sin
    let c = tape.cos(angle);
    let s = tape.sin(angle);
    let ns = tape.neg(s);
    let zero = tape.scalar(0.0);
    let one = tape.scalar(1.0);
    let mut entries = Vec::with_capacity(9);
    for row in pattern {
        for p in row {
            entries.push(match p {
                0 => zero,
                1 => one,
                2 => c,
                3 => s,
                _ => ns,
            });
        }
    }
    let m = tape.stack(&entries)?;
    Ok(tape.reshape(m, &[3, 3])?)
}

/// Differentiable [`euler_matrix`] from three scalar nodes.
pub fn euler_matrix_tape(tape: &mut Tape, azimuth: Var, elevation: Var, roll: Var) -> Result<Var> {
    let ra = rot_from_parts(tape, azimuth, [[2, 0, 3], [0, 1, 0], [-3, 0, 2]])?;
    let re = rot_from_parts(tape, elevation, [[1, 0, 0], [0, 2, 3], [0, -3, 2]])?;
    let rr = rot_from_parts(tape, roll, [[2, -3, 0], [3, 2, 0], [0, 0, 1]])?;
    let ea = tape.matmul(re, ra)?;
    Ok(tape.matmul(rr, ea)?)
}

pub fn mat_array(m: &Mat3) -> Array {
    Array::from_rows(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_half_turn() {
        let id = euler_matrix(0.0, 0.0, 0.0);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let v = mat_vec(&euler_matrix(std::f64::consts::PI, 0.0, 0.0), [1.0, 0.0, 0.0]);
        assert!((v[0] + 1.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn elevation_shows_the_top() {
        // the top's normal turns towards the camera, which looks along +z
        let n = mat_vec(&euler_matrix(0.0, 30f64.to_radians(), 0.0), [0.0, 1.0, 0.0]);
        assert!(n[2] < 0.0);
    }

    #[test]
    fn geodesic_matches_axis_angle() {
        let id = euler_matrix(0.0, 0.0, 0.0);
        for (axis, theta) in [([0.0, 1.0, 0.0], 90f64), ([0.6, 0.0, 0.8], 37.0), ([0.0, 0.0, 1.0], 179.0)] {
            let r = axis_angle(axis, theta.to_radians());
            assert!((geodesic_angle(&id, &r).to_degrees() - theta).abs() < 1e-9);
            assert!((determinant(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_matches_plain() {
        let (a, e, r) = (0.7, -0.3, 0.2);
        let mut t = Tape::new();
        let (av, ev, rv) = (t.scalar(a), t.scalar(e), t.scalar(r));
        let m = euler_matrix_tape(&mut t, av, ev, rv).unwrap();
        let want = euler_matrix(a, e, r);
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.value(m).data()[3 * i + j] - want[i][j]).abs() < 1e-15);
            }
        }
    }
}
