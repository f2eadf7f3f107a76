mod common;

use dlab_core::curriculum::evaluate;
use dlab_core::model::{EMBED, HEAD, PERCEPTION, PROJECTOR};
use dlab_core::probes::NumericTokenSet;
use dlab_core::tasks::{count_of, generate_task, SyntheticTaskSpec, TaskKind, VISUAL_DIM, VISUAL_TOKENS};
use dlab_core::{vocab, ModelConfig, Tensor, TinyLmm};
use nalgebra::{DMatrix, DVector};

fn features(v: &Tensor) -> Vec<f64> {
    let mut f: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    f.push(1.0);
    f
}

#[test]
fn count_is_linearly_decodable_from_the_image() {
    let data = generate_task(&SyntheticTaskSpec::new(TaskKind::Count, 3, 3000, 1000)).unwrap();
    let dim = VISUAL_TOKENS * VISUAL_DIM + 1;
    let x = DMatrix::from_row_iterator(data.train.len(), dim, data.train.iter().flat_map(|e| features(&e.visual)));
    let mut y = DMatrix::<f64>::zeros(data.train.len(), 9);
    for (i, e) in data.train.iter().enumerate() {
        y[(i, count_of(e).unwrap() - 1)] = 1.0;
    }
    let w = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
    let correct = data
        .eval
        .iter()
        .filter(|e| {
            let scores = DVector::from_vec(features(&e.visual)).transpose() * &w;
            scores.transpose().argmax().0 + 1 == count_of(e).unwrap()
        })
        .count();
    let acc = correct as f64 / data.eval.len() as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn answers_respect_their_token_families() {
    let digits = NumericTokenSet::digits();
    let count = generate_task(&SyntheticTaskSpec::new(TaskKind::Count, 1, 200, 50)).unwrap();
    for e in count.train.iter().chain(&count.eval) {
        assert!(digits.ids().any(|d| d == e.answer[0]));
        assert!((1..=9).contains(&count_of(e).unwrap()));
    }
    let caption = generate_task(&SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, 1, 200, 50)).unwrap();
    assert!(caption.train.iter().flat_map(|e| &e.answer).all(|&t| !vocab::is_digit(t)));
    let ocr = generate_task(&SyntheticTaskSpec::new(TaskKind::CopyOcr, 1, 100, 0)).unwrap();
    assert!(ocr.train.iter().all(|e| e.prompt[1..].contains(&e.answer[0])));
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    for kind in TaskKind::ALL {
        let spec = SyntheticTaskSpec::new(kind, 7, 10, 10);
        assert_eq!(generate_task(&spec).unwrap(), generate_task(&spec).unwrap());
        assert_ne!(generate_task(&spec).unwrap(), generate_task(&SyntheticTaskSpec { seed: 8, ..spec }).unwrap());
    }
    assert!(generate_task(&SyntheticTaskSpec::new(TaskKind::Count, 0, 0, 0)).is_err());
}

/// Ignores image content: the first answer step ties across the eight option
/// letters (so the lowest id wins) and every letter is followed by the end token.
fn uniform_choice_model(last_token_mean: &[f32]) -> TinyLmm {
    let cfg = ModelConfig { layers: 0, ..ModelConfig::default() };
    let mut model = TinyLmm::seeded(cfg, 0).unwrap();
    let d = cfg.d_model;
    let p = model.params_mut();
    let mut perception = Tensor::zeros(&[VISUAL_DIM, VISUAL_DIM]);
    for (i, &m) in last_token_mean.iter().enumerate() {
        perception.set(i, 0, m.signum());
    }
    *p.get_mut(PERCEPTION).unwrap() = perception;
    let mut proj = Tensor::zeros(&[VISUAL_DIM, d]);
    proj.set(0, 0, 1.0);
    *p.get_mut(PROJECTOR).unwrap() = proj;
    let mut embed = Tensor::zeros(&[cfg.vocab, d]);
    let mut head = Tensor::zeros(&[d, cfg.vocab]);
    for c in 0..vocab::CLASSES {
        embed.set(vocab::letter(c) as usize, 1, 1.0);
        head.set(0, vocab::letter(c) as usize, 1.0);
    }
    head.set(1, vocab::EOS as usize, 1.0);
    *p.get_mut(EMBED).unwrap() = embed;
    *p.get_mut(HEAD).unwrap() = head;
    model
}

#[test]
fn uniform_choice_scores_at_chance_on_classify() {
    let data = generate_task(&SyntheticTaskSpec::new(TaskKind::Classify, 11, 500, 4000)).unwrap();
    let mut mean = vec![0.0f32; VISUAL_DIM];
    for e in &data.train {
        for (m, v) in mean.iter_mut().zip(e.visual.row(VISUAL_TOKENS - 1)) {
            *m += v / data.train.len() as f32;
        }
    }
    let model = uniform_choice_model(&mean);
    let first = &data.eval[0];
    let out = dlab_core::model::greedy_decode(&model, &first.prompt, &first.visual, 2).unwrap();
    assert_eq!(out, vec![vocab::letter(0), vocab::EOS]);
    let acc = evaluate(&model, &data.eval).unwrap();
    assert!((10.0..=15.2).contains(&acc), "{acc}");
}
