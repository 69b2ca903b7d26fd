use proptest::prelude::*;

use sci_core::autodiff::{Graph, ParamStore, Tensor};
use sci_core::evalkit::{cmc_map, distance_matrix, evaluate, validity_masks, Protocol, SampleMeta};
use sci_core::sim::{self, CalHead};
use sci_core::sse::{self, clo_pairing, SseLossWeights};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f32..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, len)
}

fn unit_rows(t: &Tensor) -> Option<Tensor> {
    let mut rows = Vec::new();
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
        if n < 1e-3 {
            return None;
        }
        rows.push(t.row(i).iter().map(|x| x / n).collect());
    }
    Some(Tensor::from_rows(&rows).unwrap())
}

fn meta_strategy(len: usize) -> impl Strategy<Value = Vec<SampleMeta>> {
    prop::collection::vec((0u32..3, 0u32..2, 0u32..3), len).prop_map(|v| {
        v.into_iter()
            .map(|(pid, outfit, cam)| SampleMeta {
                pid,
                clothes_id: pid * 2 + outfit,
                camera_id: cam,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 5)) {
        let mut g = Graph::new();
        let v = g.input(&x);
        let s = g.softmax(v, 1).unwrap();
        for row in g.values(s).chunks(5) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent(clo in vector(8), id in vector(8)) {
        prop_assume!(id.iter().map(|x| x * x).sum::<f32>() > 1e-2);
        let id = Tensor::from_vec(id);
        let p = sse::project(&Tensor::from_vec(clo), &id).unwrap();
        let pp = sse::project(&p, &id).unwrap();
        let scale = p.data().iter().map(|x| x.abs()).fold(1.0f32, f32::max);
        for (a, b) in p.data().iter().zip(pp.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn similarity_loss_is_linear_in_weights(
        ort in matrix(3, 6), id in matrix(3, 6), clo in matrix(3, 6),
        l1 in 0.0f32..2.0, l2 in 0.0f32..2.0,
    ) {
        prop_assume!(unit_rows(&ort).is_some() && unit_rows(&id).is_some() && unit_rows(&clo).is_some());
        let eval = |w: SseLossWeights| {
            let mut g = Graph::new();
            let (a, b, c) = (g.input(&ort), g.input(&id), g.input(&clo));
            let l = sse::sse_similarity_loss(&mut g, a, b, c, w).unwrap();
            g.scalar(l)
        };
        let e1 = eval(SseLossWeights { lambda1: 1.0, lambda2: 0.0 });
        let e2 = eval(SseLossWeights { lambda1: 0.0, lambda2: 1.0 });
        let both = eval(SseLossWeights { lambda1: l1, lambda2: l2 });
        prop_assert!((both - (f64::from(l1) * e1 + f64::from(l2) * e2)).abs() < 1e-6);
    }

    #[test]
    fn attention_output_stays_in_text_hull(res in matrix(5, 4), ort in matrix(3, 4)) {
        let mut g = Graph::new();
        let (r, t) = (g.input(&res), g.input(&ort));
        let out = sim::text_guided_attention(&mut g, r, t).unwrap();
        let out = g.value(out);
        for i in 0..5 {
            for c in 0..4 {
                let mixed = f64::from(out.row(i)[c]) - f64::from(res.row(i)[c]);
                let col: Vec<f64> = (0..3).map(|k| f64::from(ort.row(k)[c])).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mixed >= lo - 1e-5 && mixed <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn stage2_losses_are_non_negative(feats in matrix(4, 6), table in matrix(3, 6), w in matrix(5, 6), logits in matrix(4, 3)) {
        prop_assume!(unit_rows(&feats).is_some() && unit_rows(&table).is_some() && unit_rows(&w).is_some());
        let labels = clo_pairing(&[(0, 0), (0, 1), (1, 2), (1, 3), (2, 4)]).unwrap();
        let mut scratch = ParamStore::new();
        let head = CalHead::new(&mut scratch, &labels, 6, 1.0 / 16.0, 0);
        let mut g = Graph::new();
        let (f, t, wv, lg) = (g.input(&feats), g.input(&table), g.input(&w), g.input(&logits));
        let id = sim::id_loss(&mut g, lg, &[0, 1, 2, 0]).unwrap();
        let cal = sim::cal_loss(&mut g, f, &[0, 0, 1, 2], &[0, 1, 3, 4], &head, wv).unwrap();
        let ce = sim::i2tce_loss(&mut g, f, t, &[0, 0, 1, 2], 0.1, 1.0 / 0.07).unwrap();
        let i2t = sse::i2t_loss(&mut g, f, f, 1.0 / 0.07).unwrap();
        for l in [id, cal.loss, ce, i2t] {
            prop_assert!(g.scalar(l) >= -1e-9);
        }
        prop_assert_eq!(cal.skipped, 1);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(q in matrix(6, 4), gal in matrix(12, 4), qm in meta_strategy(6), gm in meta_strategy(12)) {
        let (Some(q), Some(gal)) = (unit_rows(&q), unit_rows(&gal)) else { return Ok(()) };
        for p in Protocol::ALL {
            if let Ok(r) = evaluate(&q, &gal, &qm, &gm, p, 12, 1) {
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
                prop_assert!(r.map > 0.0 && r.map <= 1.0 + 1e-12);
                prop_assert_eq!(r.num_valid_queries + r.num_skipped, 6);
            }
        }
    }

    #[test]
    fn gallery_order_does_not_matter(
        q in matrix(4, 4), gal in matrix(10, 4), qm in meta_strategy(4), gm in meta_strategy(10),
        perm in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (Some(q), Some(gal)) = (unit_rows(&q), unit_rows(&gal)) else { return Ok(()) };
        let rows: Vec<Vec<f32>> = perm.iter().map(|i| gal.row(*i).to_vec()).collect();
        let pg = Tensor::from_rows(&rows).unwrap();
        let pm: Vec<SampleMeta> = perm.iter().map(|i| gm[*i]).collect();
        let d = distance_matrix(&q, &gal).unwrap();
        let ties = (0..4).any(|i| {
            let mut r = d.row(i).to_vec();
            r.sort_by(f32::total_cmp);
            r.windows(2).any(|w| w[0] == w[1])
        });
        prop_assume!(!ties);
        for p in Protocol::ALL {
            let a = evaluate(&q, &gal, &qm, &gm, p, 10, 1);
            let b = evaluate(&q, &pg, &qm, &pm, p, 10, 1);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.cmc, b.cmc);
                    prop_assert!((a.map - b.map).abs() < 1e-12);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one ordering failed"),
            }
        }
    }

    #[test]
    fn protocol_positives_partition_general(qm in meta_strategy(1), gm in meta_strategy(15)) {
        let g = validity_masks(&qm[0], &gm, Protocol::General);
        let s = validity_masks(&qm[0], &gm, Protocol::SameClothes);
        let c = validity_masks(&qm[0], &gm, Protocol::ClothChanging);
        for j in 0..gm.len() {
            prop_assert!(!(s.positive[j] && c.positive[j]));
            prop_assert_eq!(s.positive[j] || c.positive[j], g.positive[j]);
        }
    }

    #[test]
    fn single_query_ap_is_bounded(row in vector(9), pos in prop::collection::vec(any::<bool>(), 9)) {
        prop_assume!(pos.iter().any(|p| *p));
        let masks = sci_core::evalkit::QueryMasks { junk: vec![false; 9], positive: pos };
        let s = cmc_map(&row, &masks, 9).unwrap();
        prop_assert!(s.average_precision > 0.0 && s.average_precision <= 1.0);
        prop_assert!(s.hits[8]);
    }
}
