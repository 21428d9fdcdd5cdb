//! Library kernels against the naive implementations in `common`.

mod common;

use common::{max_abs_diff, random_matrix};
use cqs_core::attn_kernels::{mha_forward, Matrix, MhaParams};
use cqs_core::coding_rate::{coding_rate, CodingRateConfig};
use cqs_core::paradigms::{paradigm_aggregate, sinkhorn_normalize, softmax_over_queries, ParadigmKind, SinkhornConfig};
use cqs_core::qaa_agg::{
    build_reference_codebook, cross_query_similarity, normalize_descriptor, predict_query_features, refine_feature_queries,
    Descriptor, FeatureMap, QaaConfig, QaaParams, SimilarityMatrix,
};
use cqs_core::retrieval_eval::{haversine, RetrievalIndex};
use cqs_core::trainer::{ms_loss, MsLossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 120;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn mha_forward_matches_loop_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..=4usize);
        let dh = rng.random_range(1..=8 / heads);
        let d = heads * dh;
        let nq = rng.random_range(1..=8);
        let nk = rng.random_range(1..=8);
        let p = MhaParams::new(d, heads, &mut rng).unwrap();
        let q = random_matrix(nq, d, 1.0, &mut rng);
        let kv = random_matrix(nk, d, 1.0, &mut rng);
        let got = mha_forward(&q, &kv, &kv, &p).unwrap().out;
        let want = common::mha(&q, &kv, &kv, &p);
        let err = max_abs_diff(&want, &got);
        assert!(err < 1e-10, "seed {seed}: d={d} heads={heads} err {err:e}");
    }
}

#[test]
fn mha_with_distinct_keys_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = MhaParams::new(4, 2, &mut rng).unwrap();
    let q = random_matrix(3, 4, 1.0, &mut rng);
    let k = random_matrix(5, 4, 1.0, &mut rng);
    let v = random_matrix(5, 4, 1.0, &mut rng);
    let got = mha_forward(&q, &k, &v, &p).unwrap().out;
    assert!(max_abs_diff(&common::mha(&q, &k, &v, &p), &got) < 1e-10);
}

fn small_params(rng: &mut ChaCha8Rng) -> QaaParams {
    let n_q = rng.random_range(1..=6);
    let heads = rng.random_range(1..=2);
    let c_o = heads * rng.random_range(1..=4);
    let c_r = heads * rng.random_range(1..=3);
    let c_f = rng.random_range(1..=5);
    QaaParams::init(QaaConfig::new(n_q, c_o, c_f, c_r).with_heads(heads), rng).unwrap()
}

fn add(a: &common::Grid, b: &Matrix) -> common::Grid {
    a.iter()
        .enumerate()
        .map(|(r, row)| row.iter().enumerate().map(|(c, v)| v + b[(r, c)]).collect())
        .collect()
}

#[test]
fn query_stages_match_composed_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = small_params(&mut rng);
        let qf = &params.q_f;
        let want = add(&common::mha(qf, qf, qf, &params.feat_self_attn), qf);
        assert!(max_abs_diff(&want, &refine_feature_queries(&params).unwrap()) < 1e-10);

        let qr = &params.q_r;
        let want = add(&common::mha(qr, qr, qr, &params.ref_self_attn), qr);
        assert!(max_abs_diff(&want, &build_reference_codebook(&params).unwrap()) < 1e-10);

        let q_hat = refine_feature_queries(&params).unwrap();
        let patches = rng.random_range(1..=9);
        let x = FeatureMap::new(random_matrix(patches, params.config.c_o, 1.0, &mut rng), "x").unwrap();
        let att = common::mha(&q_hat, &x.patches, &x.patches, &params.feat_pred_attn);
        let mut want = vec![vec![0.0; params.config.c_f]; att.len()];
        for (i, row) in att.iter().enumerate() {
            for j in 0..params.config.c_f {
                want[i][j] = params.proj_b[j] + row.iter().enumerate().map(|(t, v)| v * params.proj_w[(t, j)]).sum::<f64>();
            }
        }
        let err = max_abs_diff(&want, &predict_query_features(&q_hat, &x, &params).unwrap());
        assert!(err < 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn cross_similarity_matches_triple_loop_exactly() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n_q = rng.random_range(1..=8);
        let f = random_matrix(n_q, rng.random_range(1..=6), 2.0, &mut rng);
        let p = random_matrix(n_q, rng.random_range(1..=6), 2.0, &mut rng);
        let got = cross_query_similarity(&f, &p).unwrap();
        assert_eq!(max_abs_diff(&common::cross_similarity(&f, &p), &got.0), 0.0, "seed {seed}");
    }
    // The documented 5 × (3, 4) shape.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_matrix(5, 3, 1.0, &mut rng);
    let p = random_matrix(5, 4, 1.0, &mut rng);
    let s = cross_query_similarity(&f, &p).unwrap();
    assert_eq!(s.0.shape(), (3, 4));
    assert_eq!(max_abs_diff(&common::cross_similarity(&f, &p), &s.0), 0.0);
}

#[test]
fn normalization_matches_two_stage_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (c_r, c_f) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut s = random_matrix(c_r, c_f, 3.0, &mut rng);
        // Some instances carry zero columns, which stay zero.
        if seed % 4 == 0 && c_f > 1 {
            let z = rng.random_range(0..c_f);
            for a in 0..c_r {
                s[(a, z)] = 0.0;
            }
        }
        let got = normalize_descriptor(&SimilarityMatrix(s.clone())).unwrap();
        let want = common::two_stage_normalize(&common::to_grid(&s)).unwrap();
        assert_eq!(got.dim(), c_r * c_f);
        let err = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "seed {seed}: {err:e}");
        assert!((got.norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn sinkhorn_matches_alternating_scaling_oracle() {
    let cfg = SinkhornConfig {
        max_iters: 100_000,
        tol: 1e-12,
        temperature: 1.0,
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let m = random_matrix(rng.random_range(1..=6), rng.random_range(1..=6), 2.0, &mut rng);
        let out = sinkhorn_normalize(&m, &cfg).unwrap();
        assert!(out.converged, "seed {seed}");
        assert!(out.residual < 1e-9, "seed {seed}: residual {:e}", out.residual);
        let want = common::sinkhorn(&m, 1.0, 1e-14, 100_000);
        let err = max_abs_diff(&want, &out.matrix);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn sinkhorn_temperature_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = random_matrix(4, 3, 1.0, &mut rng);
    let cfg = SinkhornConfig {
        max_iters: 100_000,
        tol: 1e-12,
        temperature: 0.5,
    };
    let out = sinkhorn_normalize(&m, &cfg).unwrap();
    assert!(max_abs_diff(&common::sinkhorn(&m, 0.5, 1e-14, 100_000), &out.matrix) < 1e-8);
}

#[test]
fn softmax_scores_match_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4500 + seed);
        let p = random_matrix(rng.random_range(1..=6), rng.random_range(1..=6), 2.0, &mut rng);
        let cols: common::Grid = (0..p.cols()).map(|c| p.column(c)).collect();
        let want_t = common::softmax_rows(&cols);
        let got = softmax_over_queries(&p);
        for (c, col) in want_t.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                assert!((v - got[(r, c)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn paradigm_descriptors_compose_from_oracles() {
    let sk = SinkhornConfig {
        max_iters: 100_000,
        tol: 1e-12,
        temperature: 1.0,
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4700 + seed);
        let n_q = rng.random_range(1..=6);
        let f = random_matrix(n_q, rng.random_range(1..=5), 1.0, &mut rng);
        let p = random_matrix(n_q, rng.random_range(1..=5), 1.0, &mut rng);
        let got = paradigm_aggregate(ParadigmKind::Ot, &f, &p, &sk).unwrap();
        let scores = Matrix::from_rows(&common::sinkhorn(&p, 1.0, 1e-14, 100_000)).unwrap();
        let want = common::two_stage_normalize(&common::cross_similarity(&f, &scores)).unwrap();
        let err = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn coding_rate_matches_eigen_oracle() {
    let cfg = CodingRateConfig::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let p = random_matrix(rng.random_range(1..=8), rng.random_range(1..=8), 1.0, &mut rng);
        let got = coding_rate(&p, &cfg).unwrap();
        let want = common::coding_rate_eigen(&p, cfg.epsilon);
        assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let p = random_matrix(6, 4, 1.0, &mut rng);
    assert!((coding_rate(&p, &cfg).unwrap() - common::coding_rate_eigen(&p, 1e-3)).abs() < 1e-8);
}

#[test]
fn coding_rate_identity_two_by_two() {
    let r = coding_rate(&Matrix::identity(2), &CodingRateConfig::default()).unwrap();
    assert!((r - 1_000_001f64.ln()).abs() < 1e-8);
    assert!((r - 13.8155).abs() < 1e-4);
    assert!((common::coding_rate_eigen(&Matrix::identity(2), 1e-3) - r).abs() < 1e-8);
}

#[test]
fn appending_a_row_tracks_the_eigen_oracle() {
    let cfg = CodingRateConfig::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5500 + seed);
        let (n, c) = (rng.random_range(1..=6), rng.random_range(1..=5));
        let p = random_matrix(n, c, 1.0, &mut rng);
        let mut rows = common::to_grid(&p);
        rows.push((0..c).map(|_| rng.random_range(0.5..1.0)).collect());
        let grown = Matrix::from_rows(&rows).unwrap();
        let before = coding_rate(&p, &cfg).unwrap();
        let after = coding_rate(&grown, &cfg).unwrap();
        let want = common::coding_rate_eigen(&grown, 1e-3) - common::coding_rate_eigen(&p, 1e-3);
        assert!(((after - before) - want).abs() < 1e-8, "seed {seed}");
    }
}

fn random_unit_descriptors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Descriptor> {
    let mut out: Vec<Descriptor> = Vec::with_capacity(n);
    for i in 0..n {
        // Every fifth record duplicates an earlier one so ties are exercised.
        let v = if i > 0 && i % 5 == 0 {
            out[rng.random_range(0..i)].values.clone()
        } else {
            unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        out.push(Descriptor::new(v, format!("r{:02}", rng.random_range(0..100))));
    }
    out
}

#[test]
fn top_k_matches_full_sort_exactly() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let db = random_unit_descriptors(&mut rng, n, dim);
        let index = RetrievalIndex::from_descriptors(&db).unwrap();
        let rows: Vec<Vec<f32>> = db.iter().map(|d| d.values.iter().map(|&v| v as f32).collect()).collect();
        let ids: Vec<String> = db.iter().map(|d| d.image_id.clone()).collect();
        let query = if seed % 3 == 0 {
            db[rng.random_range(0..n)].clone()
        } else {
            Descriptor::new(unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()), "q")
        };
        let k = rng.random_range(1..=n + 2);
        let got: Vec<(String, f64)> = index
            .top_k(&query, k)
            .unwrap()
            .hits
            .into_iter()
            .map(|h| (h.id, h.score))
            .collect();
        assert_eq!(got, common::top_k_full_sort(&rows, &ids, &query.values, k), "seed {seed}");
    }
}

#[test]
fn twenty_record_index_top_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let db: Vec<Descriptor> = (0..20)
        .map(|i| Descriptor::new(unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()), format!("db{i:02}")))
        .collect();
    let index = RetrievalIndex::from_descriptors(&db).unwrap();
    let rows: Vec<Vec<f32>> = db.iter().map(|d| d.values.iter().map(|&v| v as f32).collect()).collect();
    let ids: Vec<String> = db.iter().map(|d| d.image_id.clone()).collect();
    let q = Descriptor::new(unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()), "q");
    let got: Vec<(String, f64)> = index.top_k(&q, 5).unwrap().hits.into_iter().map(|h| (h.id, h.score)).collect();
    assert_eq!(got, common::top_k_full_sort(&rows, &ids, &q.values, 5));
}

#[test]
fn haversine_matches_law_of_cosines() {
    let d = haversine(0.0, 0.0, 0.0, 0.001).unwrap();
    assert!((d - 111.195).abs() < 1e-3, "{d}");
    let o = common::law_of_cosines_m(0.0, 0.0, 0.0, 0.001);
    assert!((d - o).abs() / o < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let (a, b) = (rng.random_range(-80.0..80.0), rng.random_range(-179.0..179.0));
        let (c, e) = (a + rng.random_range(-5.0..5.0), b + rng.random_range(-1.0..1.0));
        let h = haversine(a, b, c, e).unwrap();
        let o = common::law_of_cosines_m(a, b, c, e);
        assert!((h - o).abs() / o < 1e-6, "({a},{b})-({c},{e}): {h} vs {o}");
    }
}

#[test]
fn ms_loss_matches_scalar_oracle() {
    let params = MsLossParams::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let n = rng.random_range(2..=10);
        let classes = rng.random_range(1..=4);
        let descs: Vec<Descriptor> = (0..n)
            .map(|i| Descriptor::new(unit((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()), format!("d{i}")))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let got = ms_loss(&descs, &labels, &params).unwrap().loss;
        let raw: Vec<Vec<f64>> = descs.iter().map(|d| d.values.clone()).collect();
        let want = common::ms_loss(&raw, &labels, params.alpha, params.beta, params.lambda, params.gamma);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn ms_loss_orthogonal_pair_by_hand() {
    let descs = vec![Descriptor::new(vec![1.0, 0.0], "a"), Descriptor::new(vec![0.0, 1.0], "b")];
    let got = ms_loss(&descs, &[0, 1], &MsLossParams::default()).unwrap().loss;
    let per_anchor = (1.0 + (50.0f64 * (0.0 - 0.5)).exp()).ln() / 50.0;
    assert!((got - per_anchor).abs() < 1e-15);
    let oracle = common::ms_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 1.0, 50.0, 0.5, 0.1);
    assert!((got - oracle).abs() < 1e-15);
}
