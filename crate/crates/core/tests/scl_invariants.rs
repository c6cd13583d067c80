mod common;

use common::*;
use proptest::prelude::*;
use shipreid::data::Modality;
use shipreid::scl::{build_prototypes, describe, instance_normalize, spatial_gradients, struct_loss, IN_EPS};
use shipreid::tensor::Tape;

#[test]
fn randomized_trials() {
    for seed in 0..1000 {
        scl_trial(seed).unwrap();
    }
}

proptest! {
    #[test]
    fn gradients_ignore_channel_offsets(
        (c, h, w) in (1usize..5, 3usize..7, 3usize..7),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let base = dyadic(c * h * w, &mut r);
        let off = dyadic(c, &mut r);
        let shifted: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + off[i / (h * w)]).collect();
        let tape = Tape::<f64>::new();
        let (ax, ay) = spatial_gradients(tape.constant_from(&[1, c, h, w], base).unwrap()).unwrap();
        let (bx, by) = spatial_gradients(tape.constant_from(&[1, c, h, w], shifted).unwrap()).unwrap();
        prop_assert_eq!(ax.value(), bx.value());
        prop_assert_eq!(ay.value(), by.value());
    }

    #[test]
    fn normalised_rows_are_standard(row in prop::collection::vec(-100.0f64..100.0, 2..32)) {
        let c = row.len();
        let mean_in = row.iter().sum::<f64>() / c as f64;
        let var_in = row.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / c as f64;
        prop_assume!(var_in >= 1e-2);
        let tape = Tape::<f64>::new();
        let out = instance_normalize(tape.constant_from(&[1, c], row).unwrap(), IN_EPS).unwrap().value();
        let mean = out.iter().sum::<f64>() / c as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((0.95..=1.05).contains(&var));
    }

    #[test]
    fn normalisation_removes_positive_affine_maps(
        row in prop::collection::vec(-10.0f64..10.0, 4..32),
        a_exp in -1.0f64..2.0,
        b in -50.0f64..50.0,
    ) {
        let c = row.len();
        let mean_in = row.iter().sum::<f64>() / c as f64;
        let var_in = row.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / c as f64;
        prop_assume!(var_in >= 1.0);
        let a = 10f64.powf(a_exp);
        let tape = Tape::<f64>::new();
        let norm = |v: Vec<f64>| instance_normalize(tape.constant_from(&[1, c], v).unwrap(), IN_EPS).unwrap().value();
        let x = norm(row.clone());
        let y = norm(row.iter().map(|v| a * v + b).collect());
        for (p, q) in x.iter().zip(y.iter()) {
            prop_assert!((p - q).abs() < 1e-3);
        }
    }

    #[test]
    fn struct_loss_is_non_negative(seed in any::<u64>(), b in 2usize..5) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..2 * b).map(|i| i / 2 % 3).collect();
        let modality: Vec<Modality> = (0..2 * b)
            .map(|i| if i % 2 == 0 { Modality::Optical } else { Modality::Sar })
            .collect();
        let tape = Tape::<f64>::new();
        let grid = tape.constant_from(&[2 * b, 4, 4, 5], uniform(2 * b * 80, -1.0, 1.0, &mut r)).unwrap();
        let desc = describe(grid).unwrap();
        let pairs = build_prototypes(desc.f_hat, &labels, &modality).unwrap();
        prop_assert!(struct_loss(&tape, &pairs).unwrap().item() >= 0.0);
    }
}
