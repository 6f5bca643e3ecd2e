use dynmoe::analysis::*;
use dynmoe::distillation::{generate, score_responses, SamplingConfig, SpanTag};
use dynmoe::injection::{inject, InjectionSpec};
use dynmoe::model::*;

fn cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        num_layers: 3,
        hidden: 8,
        attn_inner: 8,
        num_heads: 2,
        kv_heads: 1,
        expert_inner: 4,
        num_experts: 4,
        top_k: 2,
        num_zero_experts: 0,
        extra_kind: ExpertKind::Zero,
        max_seq_len: 32,
        k_override: None,
    }
}

fn pair(seed: u64) -> (MoeModel, MoeModel) {
    let teacher = MoeModel::init(cfg(9), seed).unwrap();
    let student = inject(&teacher, &InjectionSpec { n_new: 2, kind: ExpertKind::Zero, seed }).unwrap();
    (teacher, student)
}

fn prompts(n: usize) -> Vec<Vec<Token>> {
    (0..n).map(|i| vec![(i % 9) as Token, ((i * 5 + 2) % 9) as Token, 4]).collect()
}

const SAMPLING: SamplingConfig = SamplingConfig { temperature: 1.0, max_len: 10 };

fn records(seed: u64) -> (MoeModel, MoeModel, Vec<TokenRecord>) {
    let (t, s) = pair(seed);
    let recs = record_rollouts(&s, &t, &prompts(16), &SAMPLING, 6, seed).unwrap();
    (t, s, recs)
}

#[test]
fn records_are_well_formed() {
    let (_, s, recs) = records(1);
    assert_eq!(recs.len(), 16 * 10);
    for r in &recs {
        assert_eq!(r.r_ze_per_layer.len(), 3);
        assert!(r.r_ze_per_layer.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = r.r_ze_per_layer.iter().sum::<f64>() / 3.0;
        assert!((r.r_ze_mean - mean).abs() <= 1e-12);
        assert!(r.entropy >= 0.0 && r.student_logp <= 0.0);
        assert_eq!(r.span_tag, tag_of(r.token_id, 6));
    }
    let k = s.config().active_k() as f64;
    // Slot-weighted global share equals the mean of layer means when K is shared.
    let slots: f64 = recs.iter().map(|r| r.r_ze_per_layer.iter().map(|v| v * k).sum::<f64>()).sum();
    let global = slots / (recs.len() as f64 * 3.0 * k);
    let layers = aggregate_by(&recs, GroupKey::Layer).unwrap();
    let mean_of_means = layers.iter().map(|g| g.r_ze).sum::<f64>() / 3.0;
    assert!((global - mean_of_means).abs() < 1e-12);
}

#[test]
fn records_agree_with_an_independent_rescoring() {
    let (t, s, recs) = records(2);
    // Same label and seed as the recorder reproduce the rollouts.
    let rollouts = generate(&s, &prompts(16), &SAMPLING, ForwardOptions::default(), 2, "analysis", 0).unwrap();
    let student = score_responses(&s, &rollouts, ForwardOptions::default()).unwrap();
    let teacher = score_responses(&t, &rollouts, ForwardOptions::default()).unwrap();
    let k = s.config().active_k() as f64;
    let mut i = 0;
    for (r, (sl, tl)) in rollouts.iter().zip(student.iter().zip(&teacher)) {
        for p in 0..r.response.len() {
            let rec = &recs[i];
            assert_eq!((rec.rollout_id, rec.position, rec.token_id), (r.id, p, r.response[p]));
            assert!((rec.student_logp - sl[p]).abs() < 1e-9);
            assert!((rec.delta_logp - (tl[p] - sl[p])).abs() < 1e-9);
            let per_layer: Vec<f64> = r.zero_selected[p].iter().map(|&z| z as f64 / k).collect();
            assert_eq!(rec.r_ze_per_layer, per_layer);
            i += 1;
        }
    }
}

#[test]
fn identical_models_have_zero_delta() {
    let t = MoeModel::init(cfg(9), 3).unwrap();
    let recs = record_rollouts(&t, &t, &prompts(4), &SAMPLING, 6, 3).unwrap();
    assert!(recs.iter().all(|r| r.delta_logp == 0.0 && r.r_ze_mean == 0.0));
}

#[test]
fn uniform_student_has_log_vocab_entropy() {
    let mut t = MoeModel::init(cfg(4), 4).unwrap();
    let i = t.params().index_of("head").unwrap();
    for v in t.params_mut().tensors_mut()[i].data_mut() {
        *v = 0.0;
    }
    let p: Vec<Vec<Token>> = vec![vec![0, 1, 2]];
    let recs = record_rollouts(&t, &t, &p, &SAMPLING, 2, 4).unwrap();
    for r in recs {
        assert!((r.entropy - 1.386294).abs() < 1e-6);
    }
}

#[test]
fn aggregates_equal_brute_force_recounts() {
    let (_, _, recs) = records(5);
    for key in [GroupKey::SpanTag, GroupKey::RolloutTag] {
        let groups = aggregate_by(&recs, key).unwrap();
        let total: usize = groups.iter().map(|g| g.count).sum();
        assert_eq!(total, recs.len());
        for g in &groups {
            let tag: SpanTag = g.key.parse().unwrap();
            let members: Vec<&TokenRecord> = recs
                .iter()
                .filter(|r| if key == GroupKey::SpanTag { r.span_tag == tag } else { r.rollout_tag == tag })
                .collect();
            let (mut r, mut e, mut d) = (0.0, 0.0, 0.0);
            for m in &members {
                r += m.r_ze_mean;
                e += m.entropy;
                d += m.delta_logp;
            }
            let n = members.len() as f64;
            assert_eq!((g.count, g.r_ze, g.entropy, g.delta_logp), (members.len(), r / n, e / n, d / n));
        }
        // Count-weighted group means recombine to the global mean.
        let global = recs.iter().map(|r| r.r_ze_mean).sum::<f64>() / recs.len() as f64;
        let recombined = groups.iter().map(|g| g.r_ze * g.count as f64).sum::<f64>() / total as f64;
        assert!((global - recombined).abs() < 1e-12);
    }

    let layers = aggregate_by(&recs, GroupKey::Layer).unwrap();
    for (l, g) in layers.iter().enumerate() {
        let mut s = 0.0;
        for r in &recs {
            s += r.r_ze_per_layer[l];
        }
        assert_eq!(g.r_ze, s / recs.len() as f64);
    }

    for (id, rs) in by_rollout(&recs) {
        let series = chunk_average(&rs, 4).unwrap();
        assert_eq!(series.chunks.iter().map(|c| c.len).collect::<Vec<_>>(), vec![4, 4, 2]);
        for c in &series.chunks {
            let mut s = 0.0;
            for r in &rs[c.start..c.start + c.len] {
                s += r.r_ze_mean;
            }
            assert_eq!(c.r_ze_mean, s / c.len as f64, "rollout {id}");
        }
        let whole = rs.iter().map(|r| r.r_ze_mean).sum::<f64>() / rs.len() as f64;
        let weighted = series.chunks.iter().map(|c| c.r_ze_mean * c.len as f64).sum::<f64>() / rs.len() as f64;
        assert!((whole - weighted).abs() < 1e-12);
    }

    let corr = correlate(&recs, XField::DeltaLogp, 7).unwrap();
    let order = sorted_by_x(&recs, XField::DeltaLogp);
    let mut start = 0;
    for b in &corr.bins {
        let mut s = 0.0;
        for &i in &order[start..start + b.count] {
            s += recs[i].r_ze_mean;
        }
        assert_eq!(b.y_mean, s / b.count as f64);
        start += b.count;
    }
    assert_eq!(start, recs.len());
}

#[test]
fn anti_monotone_records_have_rank_correlation_minus_one() {
    let (_, _, mut recs) = records(6);
    for (i, r) in recs.iter_mut().enumerate() {
        r.entropy = i as f64;
        r.r_ze_mean = -(i as f64);
    }
    assert_eq!(correlate(&recs, XField::Entropy, 5).unwrap().spearman, Some(-1.0));
    for r in &mut recs {
        r.entropy = 1.0;
    }
    assert_eq!(correlate(&recs, XField::Entropy, 5).unwrap().spearman, None);
}

#[test]
fn heatmap_extent_is_layers_by_chunks() {
    let (_, _, recs) = records(7);
    let m = layer_chunk_matrix(&recs, 4).unwrap();
    assert_eq!((m.len(), m[0].len()), (3, 3));
    let chunked = chunk_average(&recs, 2500).unwrap();
    assert_eq!(chunked.chunks.len(), 1);
}
