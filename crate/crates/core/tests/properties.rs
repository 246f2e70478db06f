//! Property tests over the public geometry and file-format surface.

use std::path::Path;

use mcdba::geometry::{project, se3_adjoint, se3_exp, se3_log, unproject, Intrinsics, Pose, Twist, DEFAULT_EPSILON_Z};
use mcdba::io::{decode_grid, encode_grid, format_tum, parse_tum, Grid};
use nalgebra::{UnitQuaternion, Vector3, Vector6};
use proptest::prelude::*;

fn twist(max_rot: f64) -> impl Strategy<Value = Twist> {
    (prop::array::uniform3(-2.0..2.0f64), prop::array::uniform3(-max_rot..max_rot)).prop_map(|(t, r)| Twist::new(Vector3::from(t), Vector3::from(r)))
}

proptest! {
    #[test]
    fn log_inverts_exp(xi in twist(1.5)) {
        let back = se3_log(&se3_exp(&xi)).unwrap().to_vector();
        prop_assert!((back - xi.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn adjoint_conjugates(a in twist(1.0), b in twist(1.0)) {
        let p = se3_exp(&a);
        let lhs = se3_exp(&Twist::from_vector(&(se3_adjoint(&p) * b.to_vector())));
        let rhs = p * se3_exp(&b) * p.inverse();
        prop_assert!((lhs.to_matrix() - rhs.to_matrix()).amax() < 1e-9);
    }

    #[test]
    fn projection_inverts_unprojection(u in 0.0..31.0f64, v in 0.0..23.0f64, d in 0.05..5.0f64) {
        let intr = Intrinsics::new(28.0, 30.0, 15.5, 11.5, 32, 24).unwrap();
        let p = project(&intr, &unproject(&intr, u, v, d), DEFAULT_EPSILON_Z).unwrap();
        prop_assert!((p[0] - u).abs() < 1e-10 && (p[1] - v).abs() < 1e-10);
    }

    #[test]
    fn grid_bytes_round_trip(h in 1usize..6, w in 1usize..6, d in 1usize..4, seed in any::<u32>()) {
        // values representable in f32 survive exactly
        let values = (0..h * w * d).map(|i| ((seed as usize).wrapping_mul(31).wrapping_add(i * 7) % 1000) as f64 / 8.0).collect();
        let g = Grid { height: h, width: w, depth: d, values };
        prop_assert_eq!(decode_grid(Path::new("mem"), &encode_grid(&g)).unwrap(), g);
    }

    #[test]
    fn tum_round_trip(xs in prop::collection::vec(twist(3.0), 1..8)) {
        let poses: Vec<(usize, Pose)> = xs.iter().enumerate().map(|(t, x)| (3 * t, se3_exp(x))).collect();
        let text = format_tum(&poses);
        let back = parse_tum(Path::new("mem"), &text).unwrap();
        prop_assert_eq!(back.len(), poses.len());
        for ((ta, a), (tb, b)) in poses.iter().zip(&back) {
            prop_assert_eq!(ta, tb);
            prop_assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-12);
        }
    }
}

#[test]
fn exp_of_zero_is_identity() {
    let p = se3_exp(&Twist::from_vector(&Vector6::zeros()));
    assert_eq!(p.to_matrix(), Pose::identity().to_matrix());
    assert_eq!(Pose::from_rotation(UnitQuaternion::identity()).to_matrix(), p.to_matrix());
}
