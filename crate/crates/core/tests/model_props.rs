mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use submhe::model::{dissipation_sample, verify_ioss_lmi, w_delta, AugmentedDisturbance};

fn vec_of(n: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(-r..r, n).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(common::config(1000))]

    #[test]
    fn certified_example_dissipates(
        x in vec_of(4, 20.0),
        x2 in vec_of(4, 20.0),
        u in vec_of(2, 1.0),
        w1 in vec_of(4, 0.1),
        w1b in vec_of(4, 0.1),
        w2 in vec_of(1, 0.1),
        w2b in vec_of(1, 0.1),
    ) {
        let (sys, cert) = common::shipped_system();
        prop_assert!(verify_ioss_lmi(&sys, &cert).unwrap().pass);
        let w = AugmentedDisturbance { w1, w2 };
        let w_other = AugmentedDisturbance { w1: w1b, w2: w2b };
        let s = dissipation_sample(&sys, &cert, &x, &x2, &u, &w, &w_other).unwrap();
        prop_assert!(s.holds(1e-9), "lhs {} > rhs {}", s.lhs, s.rhs);
    }
}

proptest! {
    #![proptest_config(common::config(256))]

    #[test]
    fn w_delta_symmetric_and_definite(x in vec_of(4, 50.0), x2 in vec_of(4, 50.0)) {
        let (_, cert) = common::shipped_system();
        let a = w_delta(&cert, &x, &x2).unwrap();
        let b = w_delta(&cert, &x2, &x).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(w_delta(&cert, &x, &x).unwrap(), 0.0);
        if x != x2 {
            prop_assert!(a > 0.0);
        }
    }
}
