use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::model::{Bound, ModelConfig, Transmissions};

fn rand_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::zeros(1, side, side);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    img
}

fn micro(seed: u64) -> Weights<f32> {
    let cfg = ModelConfig { max_instances: 6, max_chars: 5, ..ModelConfig::micro() };
    Weights::init(&cfg, seed).unwrap()
}

fn cfg_for(w: &Weights<f32>) -> DecodeConfig {
    DecodeConfig { max_instances: w.config.max_instances, max_chars: w.config.max_chars, ..Default::default() }
}

fn bias_token(w: &mut Weights<f32>, token: usize, by: f32) {
    let id = w.head.b;
    w.store.get_mut(id).data_mut()[token] += by;
}

/// Full-prefix greedy decode through the training graph, same selection
/// rules, no caches.
fn reference(w: &Weights<f32>, image: &Image, cfg: &DecodeConfig) -> (Vec<usize>, Vec<Vec<usize>>) {
    let v = w.config.vocab();
    let mut g = Graph::<f32>::new();
    let p = Bound::frozen(&mut g, &w.store);
    let m = w.encode_image(&mut g, &p, image).unwrap();
    let mut seq = vec![v.sos()];
    loop {
        let out = w.iad_forward(&mut g, &p, m, &seq).unwrap();
        let last = g.value(out.logits).row(seq.len() - 1).to_vec();
        let emitted = seq.len() - 1;
        let boundary = emitted % 2 == 0;
        let must_end = boundary && emitted / 2 >= cfg.max_instances;
        let mut ids: Vec<usize> = (0..v.n_bins()).collect();
        ids.push(v.eos());
        let tok = ids
            .into_iter()
            .filter(|&t| if t == v.eos() { boundary } else { !must_end })
            .fold((usize::MAX, f32::NEG_INFINITY), |b, t| if last[t] > b.1 { (t, last[t]) } else { b })
            .0;
        seq.push(tok);
        if tok == v.eos() {
            break;
        }
    }
    let n = (seq.len() - 2) / 2;
    if n == 0 {
        return (seq[1..].to_vec(), Vec::new());
    }
    let out = w.iad_forward(&mut g, &p, m, &seq).unwrap();
    let positions: Vec<Vec<usize>> = (0..n).map(|i| vec![1 + 2 * i, 2 + 2 * i]).collect();
    let tokens: Vec<Vec<usize>> = positions.iter().map(|ps| ps.iter().map(|&r| seq[r]).collect()).collect();
    let tx = w.transmit(&mut g, &p, out.hidden, &positions, &tokens, w.config.transmission, false).unwrap();
    let k = cfg.max_chars;
    let mut rows = Vec::new();
    for i in 0..n {
        let qi = g.slice(tx.queries, 0, 2 * i, 2 * i + 2).unwrap();
        let one = Transmissions { queries: qi, n: 1, per_instance: 2 };
        let mut row: Vec<usize> = Vec::new();
        while row.len() < k {
            let mut target = row.clone();
            target.resize(k + 1, v.pad());
            let logits = w.prd_forward(&mut g, &p, m, &one, &[target]).unwrap();
            let r = g.value(logits).row(row.len()).to_vec();
            let mut ids: Vec<usize> = v.char_range().collect();
            ids.push(v.eos());
            let tok = ids.into_iter().fold((0, f32::NEG_INFINITY), |b, t| if r[t] > b.1 { (t, r[t]) } else { b }).0;
            row.push(tok);
            if tok == v.eos() {
                break;
            }
        }
        rows.push(row);
    }
    (seq[1..].to_vec(), rows)
}

#[test]
fn cached_decoding_matches_full_prefix() {
    for seed in 0..4 {
        let mut w = micro(seed);
        // Nudge EOS so sequences end at varied lengths.
        let eos = w.config.vocab().eos();
        bias_token(&mut w, eos, 0.05 * seed as f32);
        let img = rand_image(16, seed);
        let cfg = cfg_for(&w);
        let got = decode(&w, &img, &cfg).unwrap();
        let (tokens, rows) = reference(&w, &img, &cfg);
        assert_eq!(got.raw.iad_tokens, tokens, "seed {}", seed);
        assert_eq!(got.raw.rows, rows, "seed {}", seed);
    }
}

#[test]
fn eos_first_gives_no_instances() {
    let mut w = micro(1);
    let eos = w.config.vocab().eos();
    bias_token(&mut w, eos, 100.0);
    let d = decode(&w, &rand_image(16, 1), &cfg_for(&w)).unwrap();
    assert_eq!(d.raw.iad_tokens, vec![eos]);
    assert_eq!((d.iad_loops, d.prd_loops), (1, 0));
    assert!(d.predictions.is_empty());
}

#[test]
fn forced_instance_count_emits_pairs() {
    let w = micro(2);
    let v = w.config.vocab();
    let e = Engine::new(&w);
    let mem = e.encode(&rand_image(16, 2)).unwrap();
    for n in 1..=4 {
        let r = e.run_iad(&mem, &cfg_for(&w), &Forcing { instances: Some(n), lengths: None });
        assert_eq!(r.tokens.len(), 2 * n + 1);
        assert!(r.tokens[..2 * n].iter().all(|&t| v.is_bin(t)));
        assert_eq!(r.tokens[2 * n], v.eos());
        assert_eq!(r.loops, 2 * n + 1);
    }
}

#[test]
fn location_loop_caps_at_max_instances() {
    let mut w = micro(3);
    let eos = w.config.vocab().eos();
    bias_token(&mut w, eos, -100.0);
    let d = decode(&w, &rand_image(16, 3), &cfg_for(&w)).unwrap();
    assert_eq!(d.raw.iad_tokens.len(), 2 * 6 + 1);
    assert_eq!(*d.raw.iad_tokens.last().unwrap(), eos);
    assert_eq!(d.iad_loops, 13);
}

#[test]
fn recognition_ends_early() {
    let w = micro(4);
    let v = w.config.vocab();
    let e = Engine::new(&w);
    let cfg = cfg_for(&w);
    let mem = e.encode(&rand_image(16, 4)).unwrap();
    let forcing = Forcing { instances: Some(2), lengths: Some(vec![1, 4]) };
    let iad = e.run_iad(&mem, &cfg, &forcing);
    let q = e.transmit(&iad, false);
    let r = e.run_prd(&mem, &q, &cfg, &forcing);
    assert_eq!(r.loops, 5);
    assert_eq!(r.rows[0].len(), 2);
    assert_eq!(r.rows[1].len(), 5);
    assert_eq!(*r.rows[0].last().unwrap(), v.eos());
    assert_eq!(*r.rows[1].last().unwrap(), v.eos());

    // Full-length rows stop at K without an EOS.
    let full = Forcing { instances: Some(2), lengths: Some(vec![5, 5]) };
    let r = e.run_prd(&mem, &q, &cfg, &full);
    assert_eq!(r.loops, 5);
    assert!(r.rows.iter().all(|row| row.len() == 5 && !row.contains(&v.eos())));
}

#[test]
fn loop_total_within_split_bound() {
    for seed in 0..6 {
        let w = micro(seed);
        let e = Engine::new(&w);
        let cfg = cfg_for(&w);
        let mem = e.encode(&rand_image(16, 10 + seed)).unwrap();
        let d = e.decode_memory(&mem, &cfg, &Forcing::default());
        let n = (d.raw.iad_tokens.len() - 1) / 2;
        let longest = d.raw.rows.iter().map(|r| r.iter().filter(|&&t| t != w.config.vocab().eos()).count()).max();
        assert_eq!(d.iad_loops, 2 * n + 1);
        if let Some(l) = longest {
            assert_eq!(d.prd_loops, (l + 1).min(cfg.max_chars));
        }
        assert!(d.loops() <= crate::seqcodec::loop_counts(n, cfg.max_chars).split);
    }
}

#[test]
fn batched_recognition_matches_single() {
    let w = micro(5);
    let e = Engine::new(&w);
    let cfg = cfg_for(&w);
    let mem = e.encode(&rand_image(16, 5)).unwrap();
    let iad = e.run_iad(&mem, &cfg, &Forcing { instances: Some(3), lengths: None });
    let q = e.transmit(&iad, false);
    let all = e.run_prd(&mem, &q, &cfg, &Forcing::default());
    for i in 0..3 {
        let one = e.run_prd(&mem, &q[i..i + 1], &cfg, &Forcing::default());
        assert_eq!(one.rows[0], all.rows[i]);
        for (a, b) in one.probs[0].iter().zip(&all.probs[i]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn npts_decoding_uses_slots() {
    let w = micro(6);
    let v = w.config.vocab();
    let e = Engine::new(&w);
    let cfg = DecodeConfig { npts: true, ..cfg_for(&w) };
    let mem = e.encode(&rand_image(16, 6)).unwrap();
    let d = e.decode_memory(&mem, &cfg, &Forcing { instances: Some(3), lengths: None });
    assert_eq!(d.raw.iad_tokens, vec![v.sos(), v.sos(), v.sos(), v.eos()]);
    assert_eq!(d.raw.rows.len(), 3);
    assert!(d.predictions.iter().all(|p| p.point.is_none()));
}

#[test]
fn filter_examples() {
    let p = |s: f64| Prediction { point: None, transcript: format!("{}", s), score: s };
    let preds = vec![p(0.4), p(0.9), p(0.4)];
    assert_eq!(filter(preds.clone(), 0.0).len(), 3);
    assert!(filter(preds.clone(), 1.0 + 1e-9).is_empty());
    let kept = filter(vec![p(0.9), p(0.4)], 0.5);
    assert_eq!(kept, vec![p(0.9)]);
    let sorted = filter(preds, 0.0);
    assert_eq!(sorted.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.9, 0.4, 0.4]);
}

#[test]
fn decoding_is_deterministic() {
    let w = micro(7);
    let img = rand_image(16, 7);
    let a = decode(&w, &img, &cfg_for(&w)).unwrap();
    let b = decode(&w, &img, &cfg_for(&w)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bench_accounts_loops() {
    let w = micro(8);
    let cfg = cfg_for(&w);
    let forcing = Forcing { instances: Some(4), lengths: Some(vec![1, 2, 3, 0]) };
    let r = bench(&w, &rand_image(16, 8), &cfg, &forcing).unwrap();
    assert_eq!(r.n_instances, 4);
    assert_eq!(r.joint_loops, r.predicted_joint);
    assert_eq!(r.predicted_joint, (2 + 5) * 4 + 1);
    assert_eq!(r.split_loops, 2 * 4 + 1 + 4);
    assert!(r.split_loops <= r.predicted_split);
}

#[test]
fn invalid_threshold_rejected() {
    let w = micro(9);
    let cfg = DecodeConfig { threshold: 1.5, ..cfg_for(&w) };
    assert!(decode(&w, &rand_image(16, 9), &cfg).is_err());
}
