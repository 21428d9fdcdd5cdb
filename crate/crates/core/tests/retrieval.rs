//! Recall@K on small hand-built and synthetic record sets.

use cqs_core::paradigms::{ParadigmKind, SinkhornConfig};
use cqs_core::pipeline::encode_all;
use cqs_core::qaa_agg::{Descriptor, QaaConfig, QaaParams};
use cqs_core::retrieval_eval::{recall_at_ks, PlaceRecord, Position, PositiveCriterion, RetrievalIndex};
use cqs_core::synth_data::{EvalSet, Layout, PlaceObservation, SyntheticWorld, WorldSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn at_angle(deg: f64, x: f64, id: &str) -> PlaceRecord {
    let r = deg.to_radians();
    PlaceRecord {
        descriptor: Descriptor::new(vec![r.cos(), r.sin()], id),
        position: Position::Planar { x, y: 0.0 },
        dataset: "ring".into(),
    }
}

/// Ten database records on a circle of descriptors, 100 m apart on the ground.
fn ring() -> Vec<PlaceRecord> {
    (0..10).map(|i| at_angle(36.0 * i as f64, 100.0 * i as f64, &format!("db{i}"))).collect()
}

#[test]
fn ten_record_set_matches_enumeration() {
    let db = ring();
    let queries = vec![
        // Nearest descriptor db0 is also the only positive: rank 1.
        at_angle(5.0, 10.0, "q0"),
        // db4 (16° away) outranks the positive db3 (20° away): rank 2.
        at_angle(128.0, 310.0, "q1"),
        // Order db5, db6, db4, db7: the positive db7 is rank 4.
        at_angle(185.0, 720.0, "q2"),
        // Nothing within 25 m: excluded.
        at_angle(90.0, 5000.0, "q3"),
    ];
    let reports = recall_at_ks("ring", &queries, &db, &[1, 2, 3, 4, 5], PositiveCriterion::DistanceM(25.0)).unwrap();
    let recalls: Vec<f64> = reports.iter().map(|r| r.recall).collect();
    assert_eq!(recalls, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]);
    assert!(reports.iter().all(|r| r.excluded_queries == 1 && r.evaluated_queries == 3));

    // Brute-force enumeration of every query against every record.
    for (k, report) in [1usize, 2, 3, 4, 5].iter().zip(&reports) {
        let mut hits = 0;
        let mut evaluated = 0;
        for q in &queries {
            let Position::Planar { x: qx, .. } = q.position else { unreachable!() };
            let mut scored: Vec<(f64, &PlaceRecord)> = db
                .iter()
                .map(|d| (d.descriptor.values.iter().zip(&q.descriptor.values).map(|(a, b)| a * b).sum(), d))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let positive = |d: &PlaceRecord| matches!(d.position, Position::Planar { x, .. } if (x - qx).abs() <= 25.0);
            if !db.iter().any(positive) {
                continue;
            }
            evaluated += 1;
            hits += usize::from(scored.iter().take(*k).any(|(_, d)| positive(d)));
        }
        assert_eq!(report.recall, hits as f64 / evaluated as f64, "k={k}");
    }
}

#[test]
fn query_equal_to_a_record_ranks_it_first() {
    let db: Vec<Descriptor> = ring().into_iter().map(|r| r.descriptor).collect();
    let index = RetrievalIndex::from_descriptors(&db).unwrap();
    for d in &db {
        let top = index.top_k(d, 1).unwrap();
        assert_eq!(top.hits[0].id, d.image_id);
        assert!((top.hits[0].score - 1.0).abs() < 1e-6);
    }
}

#[test]
fn index_save_load_keeps_rankings() {
    let db: Vec<Descriptor> = ring().into_iter().map(|r| r.descriptor).collect();
    let index = RetrievalIndex::from_descriptors(&db).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ring.cqsa");
    index.save(&path).unwrap();
    let back = RetrievalIndex::load(&path).unwrap();
    let q = at_angle(200.0, 0.0, "q").descriptor;
    assert_eq!(index.top_k(&q, 10).unwrap(), back.top_k(&q, 10).unwrap());
}

fn frame_records(obs: &[PlaceObservation], descs: Vec<Descriptor>) -> Vec<PlaceRecord> {
    obs.iter()
        .zip(descs)
        .map(|(o, d)| PlaceRecord {
            descriptor: d,
            position: Position::Frame {
                index: o.frame.expect("route worlds carry frames") as i64,
            },
            dataset: "route".into(),
        })
        .collect()
}

#[test]
fn looser_frame_threshold_never_lowers_recall() {
    for seed in 0..4 {
        let spec = WorldSpec {
            seed,
            num_places: 60,
            layout: Layout::Route { spacing_m: 60.0 },
            ..WorldSpec::default()
        };
        let world = SyntheticWorld::generate(&spec).unwrap();
        let ids: Vec<usize> = (0..world.num_places()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = QaaParams::init(QaaConfig::new(8, 64, 4, 8), &mut rng).unwrap();
        for domain in 0..world.domains.len() {
            let set = EvalSet::render(&world, domain, &ids, &mut rng).unwrap();
            let enc = |obs: &[PlaceObservation]| {
                let maps: Vec<_> = obs.iter().map(|o| o.features.clone()).collect();
                frame_records(obs, encode_all(&maps, &params, ParadigmKind::Cs, &SinkhornConfig::default()).unwrap())
            };
            let (db, q) = (enc(&set.database), enc(&set.queries));
            let r = |t| recall_at_ks("route", &q, &db, &[1, 5], PositiveCriterion::Frames(t)).unwrap();
            let (tight, loose) = (r(1), r(10));
            for (a, b) in tight.iter().zip(&loose) {
                assert!(a.recall <= b.recall, "seed {seed} domain {domain}: {} > {}", a.recall, b.recall);
            }
        }
    }
}

#[test]
fn mixed_position_kinds_are_rejected() {
    let q = vec![at_angle(0.0, 0.0, "q")];
    let mut db = ring();
    db[0].position = Position::Frame { index: 0 };
    assert!(recall_at_ks("ring", &q, &db, &[1], PositiveCriterion::DistanceM(25.0)).is_err());
}
