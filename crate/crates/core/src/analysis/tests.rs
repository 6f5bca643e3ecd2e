use super::*;
use crate::distillation::SpanTag;

fn synthetic(n: usize, layers: usize) -> Vec<TokenRecord> {
    (0..n)
        .map(|i| {
            let per_layer: Vec<f64> = (0..layers).map(|l| ((i * 7 + l * 3) % 5) as f64 / 4.0).collect();
            let mean = per_layer.iter().sum::<f64>() / layers as f64;
            TokenRecord {
                rollout_id: i / 16,
                position: i % 16,
                token_id: (i % 64) as u32,
                span_tag: if i % 3 == 0 { SpanTag::Structured } else { SpanTag::Natural },
                rollout_tag: if (i / 16) % 2 == 0 { SpanTag::Natural } else { SpanTag::Structured },
                entropy: (i % 13) as f64 * 0.1,
                delta_logp: -((i % 11) as f64) * 0.05,
                student_logp: -1.0,
                teacher_logp: -1.0 - (i % 11) as f64 * 0.05,
                r_ze_mean: mean,
                r_ze_per_layer: per_layer,
            }
        })
        .collect()
}

#[test]
fn spearman_edge_cases() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
    assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&x, &[5.0; 4]), Some(0.0));
    assert_eq!(spearman(&[2.0; 4], &x), None);
}

#[test]
fn bins_cover_every_record() {
    let sizes = bin_sizes(103, 10);
    assert_eq!(sizes.iter().sum::<usize>(), 103);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    let recs = synthetic(150, 2);
    let c = correlate(&recs, XField::Entropy, 7).unwrap();
    assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 150);
    assert!(c.bins.windows(2).all(|w| w[0].x_max <= w[1].x_min));
    assert!(correlate(&recs[..99], XField::Entropy, 5).is_err());
}

#[test]
fn constant_target_gives_equal_bins() {
    let mut recs = synthetic(120, 2);
    for r in &mut recs {
        r.r_ze_mean = 0.25;
    }
    let c = correlate(&recs, XField::DeltaLogp, 4).unwrap();
    assert_eq!(c.spearman, Some(0.0));
    assert!(c.bins.iter().all(|b| b.y_mean == 0.25));
}

#[test]
fn chunk_average_handles_partial_tail() {
    let recs = synthetic(70, 3);
    let s = chunk_average(&recs, 32).unwrap();
    assert_eq!(s.chunks.len(), 3);
    assert_eq!(s.last_len, 6);
    let tail = &recs[64..];
    let want = tail.iter().map(|r| r.r_ze_mean).sum::<f64>() / 6.0;
    assert_eq!(s.chunks[2].r_ze_mean, want);
    assert!(chunk_average(&recs, 0).is_err());
}

#[test]
fn aggregates_match_recount() {
    let recs = synthetic(200, 3);
    let by_tag = aggregate_by(&recs, GroupKey::SpanTag).unwrap();
    let nat: Vec<&TokenRecord> = recs.iter().filter(|r| r.span_tag == SpanTag::Natural).collect();
    assert_eq!(by_tag[0].key, "natural");
    assert_eq!(by_tag[0].count, nat.len());
    let mut sum = 0.0;
    for r in &nat {
        sum += r.r_ze_mean;
    }
    assert_eq!(by_tag[0].r_ze, sum / nat.len() as f64);
    let by_layer = aggregate_by(&recs, GroupKey::Layer).unwrap();
    assert_eq!(by_layer.len(), 3);
    let l1 = recs.iter().map(|r| r.r_ze_per_layer[1]).sum::<f64>() / 200.0;
    assert_eq!(by_layer[1].r_ze, l1);
    assert!("position".parse::<GroupKey>().is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let recs = synthetic(40, 2);
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &recs).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("rollout_id,position,token_id,span_tag,rollout_tag,entropy,delta_logp,"));
    assert!(text.lines().next().unwrap().ends_with("r_ze_mean,r_ze_layer_0,r_ze_layer_1"));
    assert_eq!(read_records_csv(&buf[..]).unwrap(), recs);
}

#[test]
fn plots_are_deterministic_and_report_missing_inputs() {
    let recs = synthetic(160, 2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let err = emit_plots(a.path(), b.path(), 4, 5).unwrap_err().to_string();
    assert!(err.contains(RECORDS_FILE));
    write_records_csv(std::fs::File::create(a.path().join(RECORDS_FILE)).unwrap(), &recs).unwrap();
    let first = emit_plots(a.path(), b.path(), 4, 5).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second = emit_plots(a.path(), b.path(), 4, 5).unwrap();
    assert_eq!(first, second);
    for (p, want) in second.iter().zip(bytes) {
        assert_eq!(std::fs::read(p).unwrap(), want);
    }
    let m = layer_chunk_matrix(&recs, 4).unwrap();
    assert_eq!((m.len(), m[0].len()), (2, 4));
}
