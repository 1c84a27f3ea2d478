mod common;

use common::*;
use swavenet::model::dependency_set;
use swavenet::ModelConfig;

const T: usize = 32;

#[test]
fn emission_and_prior_ignore_present_and_future_frames() {
    let config = ModelConfig::new(4, 2, 4, 4, 2);
    let m = random_model(config, 1, 0.7);
    let batch = random_batch(1, T, 2, 2);
    let z = random_latents(&m, 1, T, 3);
    let base = snapshot(&m, &batch, &z);
    for s in 0..T {
        let moved = snapshot(&m, &perturbed(&batch, s, 1.5), &z);
        for t in 0..=s {
            assert_eq!(max_row_diff(&base.emission, &moved.emission, t, 2, 2), 0.0, "emission t={t} s={s}");
            for (k, p) in base.prior.iter().enumerate() {
                assert_eq!(max_row_diff(p, &moved.prior[k], t, base.latent, 2), 0.0, "prior t={t} s={s}");
            }
        }
        // Strictly earlier frames do reach the emission.
        if s + 1 < T {
            assert!(row_differs(&base.emission, &moved.emission, s + 1, 2, 2));
        }
    }
}

#[test]
fn prior_ignores_same_step_higher_latents_and_future_latents() {
    let config = ModelConfig::new(3, 3, 3, 3, 1);
    let m = random_model(config, 4, 0.7);
    let t_len = 12;
    let batch = random_batch(1, t_len, 1, 5);
    let z = random_latents(&m, 1, t_len, 6);
    let base = snapshot(&m, &batch, &z);
    for (slot, zl) in z.iter().enumerate() {
        for t in 0..t_len {
            let mut zp = z.to_vec();
            zp[slot] = zl.clone();
            zp[slot].values_mut()[t] += 1.0;
            let moved = snapshot(&m, &batch, &zp);
            for (k, p) in base.prior.iter().enumerate() {
                for u in 0..t_len {
                    let may_change = u > t || (u == t && k > slot);
                    if !may_change {
                        assert_eq!(max_row_diff(p, &moved.prior[k], u, 1, 2), 0.0, "z slot {slot} t={t} -> prior {k} at {u}");
                    }
                }
            }
        }
    }
}

#[test]
fn backward_feature_cones_equal_dependency_sets() {
    for big_l in [2, 3, 4] {
        let config = ModelConfig::new(big_l, big_l, 3, big_l, 1);
        let m = random_model(config.clone(), 10 + big_l as u64, 0.7);
        let batch = random_batch(1, T, 1, 7);
        let z = random_latents(&m, 1, T, 8);
        let base = snapshot(&m, &batch, &z);
        let moved: Vec<_> = (0..T).map(|s| snapshot(&m, &perturbed(&batch, s, 1.0), &z)).collect();
        for (slot, l) in config.stochastic_layer_indices().enumerate() {
            for t in 1..=T {
                let expect = dependency_set(&config, l, t, T).unwrap();
                let cone: Vec<usize> = (1..=T)
                    .filter(|&s| row_differs(&base.backward[slot], &moved[s - 1].backward[slot], t - 1, 3, 1))
                    .collect();
                assert_eq!(cone, expect, "b cone L={big_l} l={l} t={t}");

                // Past frames reach z_{t,l} through h_{t,l}, whose causal
                // receptive field after l layers spans 2^l frames.
                let mut conditioning: Vec<usize> = (t.saturating_sub(1 << l).max(1)..t).collect();
                conditioning.extend(expect.iter().copied());
                let measured: Vec<usize> = (1..=T)
                    .filter(|&s| row_differs(&base.posterior[slot], &moved[s - 1].posterior[slot], t - 1, 1, 2))
                    .collect();
                assert_eq!(measured, conditioning, "posterior L={big_l} l={l} t={t}");
            }
        }
    }
}
