//! Finite differences through selector, encoder and head together.

use grounded::config::Config;
use grounded::gradcheck::finite_diff_check_fine;
use grounded::model::{Model, Route};
use grounded::params::Binding;
use grounded::rng::Rng;
use grounded::selector::SelectMode;
use grounded::task::Episode;
use grounded::tokenizer::ProprioState;
use grounded::{Tape, Tensor};

fn config() -> Config {
    Config::parse(
        "grid = 2\nd_model = 8\nlayers = 1\nheads = 2\nmax_seq = 16\nvocab = 32\nbins = 8\n\
         proprio_dim = 3\nhorizon = 2\naction_dim = 2\nhead_hidden = 8\nhead_layers = 1\nhead_heads = 2",
    )
    .unwrap()
}

fn episode(seed: u64) -> Episode {
    let mut rng = Rng::new(seed);
    Episode {
        visual: rng.normal_tensor(&[6, 8], 1.0),
        instruction: vec![1, 3],
        state: ProprioState(vec![-0.7, 0.4, 1.9]),
        target: rng.normal_tensor(&[2, 2], 1.0),
        goal: 0,
        effector: 1,
    }
}

/// Moves every parameter off its structured init (zero modulation, unit
/// gains) so no gradient vanishes by construction.
fn jittered(model_seed: u64) -> (Model, Vec<Tensor>) {
    let c = config();
    let (model, params) = Model::with_visual_tokens(&c, 6, &mut Rng::new(model_seed)).unwrap();
    let mut rng = Rng::new(model_seed + 100);
    let values = params
        .iter()
        .map(|p| {
            let mut v = p.value.clone();
            for x in v.data_mut() {
                *x += 0.3 * rng.normal();
            }
            v
        })
        .collect();
    (model, values)
}

#[test]
fn end_to_end_gradient_matches_differences() {
    for seed in 0..2 {
        let (model, values) = jittered(seed);
        let ep = episode(seed + 7);
        let alpha = 0.7;

        // Reference pass fixes the mask and the stop-gradient anchor.
        let tape = Tape::new();
        let p = Binding::from_vars(values.iter().map(|v| tape.leaf(v.clone())).collect());
        let c = model
            .condition(&tape, &ep, &p, SelectMode::Train { alpha }, &Route::Config, &mut Rng::new(11))
            .unwrap();
        let mask = c.mask.clone().unwrap();
        let anchor = c.probs.clone().unwrap();
        assert!(mask.iter().any(|&m| m) && mask.len() == 6);
        let pinned = SelectMode::Pinned { alpha, mask, anchor };

        let r = finite_diff_check_fine(
            |tape, vars| {
                let p = Binding::from_vars(vars.to_vec());
                let (loss, _) =
                    model.loss(tape, &ep, &p, pinned.clone(), &Route::Config, &mut Rng::new(11), &mut Rng::new(12))?;
                Ok(loss)
            },
            &values,
            1e-3,
        )
        .unwrap();
        assert!(r.checked > 1000);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn pinned_pass_reproduces_the_training_pass() {
    let (model, values) = jittered(3);
    let ep = episode(4);
    let run = |mode: SelectMode| {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let p = Binding::from_vars(vars.clone());
        let (loss, c) = model.loss(&tape, &ep, &p, mode, &Route::Config, &mut Rng::new(5), &mut Rng::new(6)).unwrap();
        let value = loss.item();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        (value, grads, c.mask.unwrap(), c.probs.unwrap())
    };
    let (l0, g0, mask, anchor) = run(SelectMode::Train { alpha: 0.5 });
    let (l1, g1, ..) = run(SelectMode::Pinned { alpha: 0.5, mask, anchor });
    assert_eq!(l0.to_bits(), l1.to_bits());
    assert_eq!(g0, g1);
}
