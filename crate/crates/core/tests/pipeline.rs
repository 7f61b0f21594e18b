use proxyattn::mask::{read_mask_file, write_mask_file};
use proxyattn::pipeline::{run_pipeline, tail_cosine, PipelineOptions};
use proxyattn::proxy::estimate_proxy_scores;
use proxyattn::tensor_io::{read_qkv_file, write_qkv_file};
use proxyattn::workloads::{generate, WorkloadKind, WorkloadSpec};
use proxyattn::AttnConfig;

fn cfg(n: usize) -> AttnConfig {
    AttnConfig { n_q_heads: 8, n_kv_heads: 2, head_dim: 64, block_size: 64, ..Default::default() }.with_seq_len(n)
}

#[test]
fn needle_tail_tokens_track_dense_output() {
    let c = AttnConfig { gamma: 0.95, ..cfg(2048) };
    let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::Needle, 7, c)).unwrap();
    let r = run_pipeline(&q, &k, &v, &c, &PipelineOptions::default()).unwrap();
    for (h, (_, min)) in tail_cosine(&r, 64).into_iter().enumerate() {
        assert!(min >= 0.99, "head {h}: min tail cosine {min}");
    }
}

#[test]
fn mixed_sparsity_heads_keep_recall() {
    let c = AttnConfig { gamma: 0.95, ..cfg(2048) };
    let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::Mixture, 2, c)).unwrap();
    let r = run_pipeline(&q, &k, &v, &c, &PipelineOptions::default()).unwrap();
    assert!(r.mean_recall() >= 0.90, "{}", r.mean_recall());
    assert!(r.mean_sparsity() > 0.0);
}

#[test]
fn strided_estimate_keeps_the_top_blocks() {
    let base = cfg(2048);
    let (q, k, _) = generate(&WorkloadSpec::new(WorkloadKind::RandomSmooth, 4, base)).unwrap();
    let coarse = estimate_proxy_scores(&q, &k, &AttnConfig { stride: 4, ..base }).unwrap();
    let fine = estimate_proxy_scores(&q, &k, &AttnConfig { stride: 1, ..base }).unwrap();
    let (mut shared, mut rows) = (0usize, 0usize);
    for h in 0..base.n_q_heads {
        for m in 7..base.n_blocks() {
            let a = &coarse.for_head(h).ranked_row(m)[..8];
            let b = &fine.for_head(h).ranked_row(m)[..8];
            shared += a.iter().filter(|x| b.contains(x)).count();
            rows += 1;
        }
    }
    let mean = shared as f64 / rows as f64;
    assert!(mean >= 6.0, "mean top-8 overlap {mean}");
}

#[test]
fn file_round_trips_preserve_pipeline_results() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(1024);
    let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::LocalWindow, 1, c)).unwrap();
    let qkv = dir.path().join("in.pxqk");
    write_qkv_file(&q, &k, &v, &qkv).unwrap();
    let (q2, k2, v2) = read_qkv_file(&qkv).unwrap();

    let opts = PipelineOptions::default();
    let a = run_pipeline(&q, &k, &v, &c, &opts).unwrap();
    let b = run_pipeline(&q2, &k2, &v2, &c, &opts).unwrap();
    assert_eq!(a.output.data(), b.output.data());
    assert_eq!(a.mask, b.mask);

    let mask = dir.path().join("m.pxmk");
    write_mask_file(&a.mask, &mask).unwrap();
    assert_eq!(read_mask_file(&mask).unwrap(), a.mask);
}

#[test]
fn every_estimator_yields_a_valid_mask() {
    let c = cfg(1024);
    let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::Mixture, 8, c)).unwrap();
    for estimator in proxyattn::comparators::EstimatorKind::ALL {
        let r = run_pipeline(&q, &k, &v, &c, &PipelineOptions { estimator, ..Default::default() }).unwrap();
        r.mask.check_causal_and_diagonal().unwrap();
        assert_eq!(r.heads.len(), 8);
        assert!(r.heads.iter().all(|h| (0.0..=1.0).contains(&h.recall)), "{estimator}");
    }
}
