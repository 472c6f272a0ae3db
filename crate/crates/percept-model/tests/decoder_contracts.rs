//! Contract tests for the deformable decoder and its shared heads:
//! residual identities, bilinear sampling closed forms, layer-count rules,
//! denoising isolation (bit-exact), head semantics, box-refinement bounds,
//! and end-to-end gradient checks against finite differences.

use percept_autograd::{fdcheck, Graph, NodeId, Tensor};
use percept_core::{BBox, RasterImage};
use percept_model::encoder::{grid_centers, EncodedImage};
use percept_model::tokenizer::build_prompt;
use percept_model::{
    DecodePhase, DenoisingConfig, Granularity, Model, ModelConfig, QuerySet, Tokenizer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_model(seed: u64) -> Model {
    let tok = Tokenizer::build([
        "the red square sits on the floor",
        "a blue circle floats near the wall",
        "find the target now",
    ]);
    Model::new(ModelConfig::desk(), tok, seed).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

/// Random but fixed pyramid + pixel map for a config.
fn random_pyramid(g: &mut Graph, cfg: &ModelConfig, seed: u64) -> EncodedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sides = cfg.level_sides().to_vec();
    let levels: Vec<NodeId> = sides
        .iter()
        .map(|&s| {
            let t = random_tensor(&mut rng, s * s, cfg.d_vis, 1.0);
            g.constant(t)
        })
        .collect();
    let pixel_side = cfg.pixel_side();
    let pixel = g.constant(random_tensor(&mut rng, pixel_side * pixel_side, cfg.d_dec, 1.0));
    EncodedImage { levels, level_sides: sides, pixel, pixel_side }
}

/// Plain query set with given content rows and interior reference boxes.
fn plain_queries(g: &mut Graph, n: usize, d_dec: usize, seed: u64) -> QuerySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = g.constant(random_tensor(&mut rng, n, d_dec, 1.0));
    let mut refs = Tensor::zeros(n, 4);
    for i in 0..n {
        refs.set(i, 0, rng.gen_range(0.2..0.8));
        refs.set(i, 1, rng.gen_range(0.2..0.8));
        refs.set(i, 2, rng.gen_range(0.1..0.4));
        refs.set(i, 3, rng.gen_range(0.1..0.4));
    }
    let references = g.constant(refs);
    QuerySet {
        content,
        references,
        provenance: (0..n).map(percept_model::QueryProvenance::Bank).collect(),
        num_instance: n,
    }
}

fn zero_param(m: &mut Model, name: &str) {
    let pid = m.pid(name);
    let t = m.store.get_mut(pid);
    for v in t.data_mut() {
        *v = 0.0;
    }
}

// ------------------------------------------------------------ cross-attn

#[test]
fn zero_output_projection_makes_cross_attention_identity() {
    let mut m = desk_model(0);
    zero_param(&mut m, "dec.0.cross_out.w");
    zero_param(&mut m, "dec.0.cross_out.b");
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &m.config.clone(), 1);
    let vals = m.project_values(&mut g, &enc);
    let qs = plain_queries(&mut g, 6, m.config.d_dec, 2);
    let out = m.deform_cross(&mut g, qs.content, qs.references, &vals, 0);
    assert_eq!(g.value(out).data(), g.value(qs.content).data());
}

#[test]
fn bilinear_sampling_is_exact_at_cell_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let side = 4;
    let grid = random_tensor(&mut rng, side * side, 3, 1.0);
    let mut g = Graph::new();
    let feats = g.constant(grid.clone());
    let pos = g.constant(grid_centers(side));
    let sampled = g.bilinear_sample(feats, side, side, pos);
    for i in 0..side * side {
        for c in 0..3 {
            assert!(
                (g.value(sampled).get(i, c) - grid.get(i, c)).abs() < 1e-12,
                "cell {i} channel {c}"
            );
        }
    }
}

#[test]
fn bilinear_center_of_two_by_two_is_the_mean() {
    let grid = Tensor::from_vec(4, 1, vec![1.0, 3.0, 5.0, 9.0]);
    let mut g = Graph::new();
    let feats = g.constant(grid);
    let pos = g.constant(Tensor::from_vec(1, 2, vec![0.5, 0.5]));
    let sampled = g.bilinear_sample(feats, 2, 2, pos);
    assert!((g.value(sampled).get(0, 0) - 4.5).abs() < 1e-12);
}

// ----------------------------------------------------------------- decode

#[test]
fn single_layer_training_and_inference_coincide() {
    let tok = Tokenizer::build(["a"]);
    let mut cfg = ModelConfig::desk();
    cfg.decoder_layers = 1;
    let m = Model::new(cfg.clone(), tok, 3).unwrap();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 7);
    let qs = plain_queries(&mut g, 5, cfg.d_dec, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let aligned = g.constant(random_tensor(&mut rng, 2, cfg.d_vis, 1.0));
    let train = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Training)
        .unwrap();
    let infer = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Inference)
        .unwrap();
    assert_eq!(train.layers.len(), 1);
    assert_eq!(infer.layers.len(), 1);
    let (a, b) = (&train.layers[0], infer.final_layer());
    assert_eq!(g.value(a.class_logits).data(), g.value(b.class_logits).data());
    assert_eq!(g.value(a.boxes).data(), g.value(b.boxes).data());
    assert_eq!(g.value(a.mask_logits).data(), g.value(b.mask_logits).data());
}

#[test]
fn training_emits_all_layers_and_inference_only_the_last() {
    let m = desk_model(1);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 2);
    let qs = plain_queries(&mut g, 7, cfg.d_dec, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let aligned = g.constant(random_tensor(&mut rng, 3, cfg.d_vis, 1.0));
    let train = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Training)
        .unwrap();
    assert_eq!(train.layers.len(), cfg.decoder_layers);
    for layer in &train.layers {
        assert_eq!(g.value(layer.boxes).shape(), (7, 4));
        assert_eq!(g.value(layer.class_logits).shape(), (7, 4)); // 3 labels + no-object
        assert_eq!(
            g.value(layer.mask_logits).shape(),
            (7, cfg.pixel_side() * cfg.pixel_side())
        );
    }
    let infer = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Inference)
        .unwrap();
    assert_eq!(infer.layers.len(), 1);
}

#[test]
fn denoising_rows_leave_ordinary_outputs_bit_identical() {
    let m = desk_model(6);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 11);
    let qs = plain_queries(&mut g, 6, cfg.d_dec, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let aligned = g.constant(random_tensor(&mut rng, 3, cfg.d_vis, 1.0));
    let gt = vec![
        (0usize, BBox::new(0.3, 0.3, 0.2, 0.2).unwrap()),
        (2usize, BBox::new(0.6, 0.7, 0.3, 0.2).unwrap()),
    ];
    let mut dn_rng = ChaCha8Rng::seed_from_u64(14);
    let dn = m
        .build_denoising(&mut g, &gt, 3, DenoisingConfig::default(), &mut dn_rng)
        .unwrap()
        .unwrap();

    let with = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, Some(&dn), DecodePhase::Training)
        .unwrap();
    let without = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Training)
        .unwrap();
    assert_eq!(with.num_denoising, 4);
    assert_eq!(without.num_denoising, 0);
    for (lw, lo) in with.layers.iter().zip(&without.layers) {
        for (node_w, node_o) in [
            (lw.class_logits, lo.class_logits),
            (lw.boxes, lo.boxes),
            (lw.mask_logits, lo.mask_logits),
        ] {
            let a = g.value(node_w);
            let b = g.value(node_o);
            assert_eq!(a.cols(), b.cols());
            assert_eq!(a.rows(), b.rows() + 4);
            for i in 0..b.rows() {
                for j in 0..b.cols() {
                    assert!(
                        a.get(i, j) == b.get(i, j),
                        "ordinary row {i} col {j} drifted: {} vs {}",
                        a.get(i, j),
                        b.get(i, j)
                    );
                }
            }
        }
    }
}

#[test]
fn zero_noise_denoising_queries_predict_their_ground_truth() {
    let m = desk_model(15);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 16);
    let qs = plain_queries(&mut g, 4, cfg.d_dec, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let aligned = g.constant(random_tensor(&mut rng, 3, cfg.d_vis, 1.0));
    let gt = vec![
        (0usize, BBox::new(0.4, 0.35, 0.22, 0.18).unwrap()),
        (1usize, BBox::new(0.65, 0.6, 0.3, 0.25).unwrap()),
    ];
    let dn_cfg = DenoisingConfig { groups: 2, box_noise: 0.0, label_noise: 0.0 };
    let dn = m.build_denoising(&mut g, &gt, 3, dn_cfg, &mut rng).unwrap().unwrap();
    let preds = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, Some(&dn), DecodePhase::Training)
        .unwrap();
    // The box head's final projection is zero-initialized, so with zero
    // noise every denoising query's box equals its source ground truth at
    // every layer.
    for layer in &preds.layers {
        let boxes = g.value(layer.boxes);
        for (row, &src) in dn.gt_index.iter().enumerate() {
            let r = preds.num_query + row;
            let want = gt[src].1;
            for (c, v) in [want.cx, want.cy, want.w, want.h].into_iter().enumerate() {
                assert!(
                    (boxes.get(r, c) - v).abs() < 1e-9,
                    "dn row {row} layer box drifted: {} vs {v}",
                    boxes.get(r, c)
                );
            }
        }
    }
}

#[test]
fn fresh_model_predicts_its_reference_boxes() {
    let m = desk_model(20);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 21);
    let qs = plain_queries(&mut g, 8, cfg.d_dec, 22);
    let refs = g.value(qs.references).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let aligned = g.constant(random_tensor(&mut rng, 2, cfg.d_vis, 1.0));
    let preds = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Training)
        .unwrap();
    for layer in &preds.layers {
        let boxes = g.value(layer.boxes);
        for i in 0..8 {
            for j in 0..4 {
                assert!(
                    (boxes.get(i, j) - refs.get(i, j)).abs() < 1e-9,
                    "query {i} field {j}: {} vs {}",
                    boxes.get(i, j),
                    refs.get(i, j)
                );
            }
        }
    }
}

#[test]
fn references_stay_normalized_after_every_layer() {
    let mut m = desk_model(24);
    // Give the box head real residuals so refinement actually moves boxes.
    let pid = m.pid("head.box2.w");
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    {
        let t = m.store.get_mut(pid);
        for v in t.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let enc = random_pyramid(&mut g, &cfg, 26);
    let qs = plain_queries(&mut g, 10, cfg.d_dec, 27);
    let aligned = g.constant(random_tensor(&mut rng, 2, cfg.d_vis, 1.0));
    let preds = m
        .decode(&mut g, &enc, &qs, aligned, Granularity::WordBased, None, DecodePhase::Training)
        .unwrap();
    let mut moved = false;
    let refs = g.value(qs.references).clone();
    for layer in &preds.layers {
        let boxes = g.value(layer.boxes);
        for i in 0..boxes.rows() {
            for j in 0..4 {
                let v = boxes.get(i, j);
                assert!((0.0..=1.0).contains(&v), "box value {v} escaped [0,1]");
                if (v - refs.get(i, j)).abs() > 1e-6 {
                    moved = true;
                }
            }
        }
    }
    assert!(moved, "nonzero box head must move at least one box");
}

// ------------------------------------------------------------------ heads

#[test]
fn aligned_query_wins_the_argmax() {
    let m = desk_model(30);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = g.constant(random_tensor(&mut rng, 1, cfg.d_dec, 1.0));
    let proj = m.similarity_projection(&mut g, x);
    let p: Vec<f64> = g.value(proj).row(0).to_vec();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = p.iter().map(|v| v / norm).collect();
    // Label 1 = the projection direction itself; labels 0 and 2 orthogonal.
    let mut others = Vec::new();
    for seed in [32u64, 33] {
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..cfg.d_vis).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        let dot: f64 = v.iter().zip(&unit).map(|(a, b)| a * b).sum();
        for (vi, ui) in v.iter_mut().zip(&unit) {
            *vi -= dot * ui;
        }
        others.push(v);
    }
    let mut text = Tensor::zeros(3, cfg.d_vis);
    for j in 0..cfg.d_vis {
        text.set(0, j, others[0][j]);
        text.set(1, j, unit[j]);
        text.set(2, j, others[1][j]);
    }
    let aligned = g.constant(text);
    let logits = m.similarity_head(&mut g, x, aligned, Granularity::WordBased).unwrap();
    let row = g.value(logits);
    assert_eq!(row.shape(), (1, 4));
    assert!((row.get(0, 1) - 10.0).abs() < 1e-9, "unit cosine scaled by temperature");
    assert!(row.get(0, 0).abs() < 1e-9);
    assert!(row.get(0, 2).abs() < 1e-9);
    let argmax = (0..4).max_by(|&a, &b| row.get(0, a).partial_cmp(&row.get(0, b)).unwrap());
    assert_eq!(argmax, Some(1));
}

#[test]
fn sentence_mode_emits_one_score_per_query() {
    let m = desk_model(34);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let x = g.constant(random_tensor(&mut rng, 9, cfg.d_dec, 1.0));
    let one = g.constant(random_tensor(&mut rng, 1, cfg.d_vis, 1.0));
    let scores = m.similarity_head(&mut g, x, one, Granularity::SentenceBased).unwrap();
    assert_eq!(g.value(scores).shape(), (9, 1));
    // Two expressions in sentence mode is a contract violation.
    let two = g.constant(random_tensor(&mut rng, 2, cfg.d_vis, 1.0));
    assert!(m.similarity_head(&mut g, x, two, Granularity::SentenceBased).is_err());
}

#[test]
fn permuting_labels_permutes_logits() {
    let m = desk_model(36);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = g.constant(random_tensor(&mut rng, 5, cfg.d_dec, 1.0));
    let text = random_tensor(&mut rng, 4, cfg.d_vis, 1.0);
    let perm = [2usize, 0, 3, 1];
    let mut permuted = Tensor::zeros(4, cfg.d_vis);
    for (to, &from) in perm.iter().enumerate() {
        for j in 0..cfg.d_vis {
            permuted.set(to, j, text.get(from, j));
        }
    }
    let a = g.constant(text);
    let b = g.constant(permuted);
    let la = m.similarity_head(&mut g, x, a, Granularity::WordBased).unwrap();
    let lb = m.similarity_head(&mut g, x, b, Granularity::WordBased).unwrap();
    let (va, vb) = (g.value(la), g.value(lb));
    for q in 0..5 {
        for (to, &from) in perm.iter().enumerate() {
            assert_eq!(vb.get(q, to), va.get(q, from), "query {q} label {from}->{to}");
        }
        // No-object column rides along unchanged.
        assert_eq!(vb.get(q, 4), va.get(q, 4));
    }
}

#[test]
fn mask_logits_scale_bilinearly_with_the_projection() {
    let m = desk_model(38);
    let cfg = m.config.clone();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let pixel_cells = cfg.pixel_side() * cfg.pixel_side();
    let pixel = g.constant(random_tensor(&mut rng, pixel_cells, cfg.d_dec, 1.0));
    let x = g.constant(random_tensor(&mut rng, 3, cfg.d_dec, 1.0));
    let proj = m.mask_projection(&mut g, x);
    let logits = m.mask_logits_from(&mut g, proj, pixel);
    assert_eq!(g.value(logits).shape(), (3, pixel_cells));
    let doubled = g.scale(proj, 2.0);
    let logits2 = m.mask_logits_from(&mut g, doubled, pixel);
    for i in 0..3 {
        for j in 0..pixel_cells {
            assert_eq!(
                g.value(logits2).get(i, j),
                2.0 * g.value(logits).get(i, j),
                "mask logit ({i},{j}) must scale exactly"
            );
        }
    }
}

// --------------------------------------------------- end-to-end gradients

struct Pipeline {
    model: Model,
    image: RasterImage,
    labels: Vec<String>,
    response: String,
}

impl Pipeline {
    fn new(seed: u64) -> Self {
        let model = desk_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let bytes: Vec<u8> = (0..64 * 64 * 3).map(|_| rng.gen()).collect();
        let image = RasterImage::from_rgb(64, 64, bytes).unwrap();
        Self {
            model,
            image,
            labels: vec!["red square".into(), "blue circle".into(), "floor".into()],
            response: "a scene with shapes. The perception result is <PER>".into(),
        }
    }

    /// Builds the whole forward pass and returns the scalar loss node.
    ///
    /// `first_layer_only` restricts the head terms to the first decoder
    /// layer. Between layers the refined boxes are detached before becoming
    /// the next references, so a full-depth loss is deliberately blind to
    /// those paths; parameters that move the initial references must be
    /// finite-difference-checked against a loss that stops before any
    /// detach point.
    fn forward(&self, g: &mut Graph, with_dn: bool, include_stuff: bool, first_layer_only: bool) -> NodeId {
        let m = &self.model;
        let enc = m.encode_image(g, &self.image).unwrap();
        let vis = m.connect(g, &enc);
        let seq = build_prompt(
            &m.tokenizer,
            "Please identify all objects according to the given phrase list. This is all the candidate phrases.",
            &self.labels,
            Some(&self.response),
        )
        .unwrap();
        let lm = m.lm_forward(g, Some(vis), &seq).unwrap();
        let text = m.instruction_embeddings(g, &lm, &seq, Granularity::WordBased).unwrap();
        let aligned = m.align_text(g, text);
        let summary = m.summary_hidden(g, &lm, &seq).unwrap();
        let qs = m.build_queries(g, &enc, summary, aligned, include_stuff).unwrap();
        let dn = if with_dn {
            let gt = vec![
                (0usize, BBox::new(0.3, 0.4, 0.2, 0.25).unwrap()),
                (1usize, BBox::new(0.7, 0.55, 0.25, 0.2).unwrap()),
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            m.build_denoising(g, &gt, self.labels.len(), DenoisingConfig::default(), &mut rng)
                .unwrap()
        } else {
            None
        };
        let preds = m
            .decode(g, &enc, &qs, aligned, Granularity::WordBased, dn.as_ref(), DecodePhase::Training)
            .unwrap();
        // Scalarize everything the heads produce plus the next-token loss,
        // so gradients must reach every component. The linear class term
        // matters: the no-object logit starts at zero, where a pure squared
        // penalty has zero slope.
        let mut total = m.lm_loss(g, &lm, &seq).unwrap();
        let taken = if first_layer_only { 1 } else { preds.layers.len() };
        for layer in preds.layers.iter().take(taken) {
            let c2 = g.mul(layer.class_logits, layer.class_logits);
            let cs = g.sum_all(c2);
            let cs = g.scale(cs, 0.01);
            let cl = g.sum_all(layer.class_logits);
            let cl = g.scale(cl, 0.1);
            let b2 = g.mul(layer.boxes, layer.boxes);
            let bs = g.sum_all(b2);
            let m2 = g.mul(layer.mask_logits, layer.mask_logits);
            let ms = g.sum_all(m2);
            let ms = g.scale(ms, 1e-4);
            total = g.add(total, cs);
            total = g.add(total, cl);
            total = g.add(total, bs);
            total = g.add(total, ms);
        }
        total
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut pipe = Pipeline::new(42);

    // (parameter, first-layer-only loss?) — see `forward` for why the two
    // reference-shaping parameters use the shallow loss.
    let checked: [(&str, bool); 21] = [
        ("enc.stem3.w", false),
        ("enc.pix_from4.w", false),
        ("conn.w", false),
        ("lm.tok_embed", false),
        ("lm.0.attn.wv.w", false),
        ("lm.1.ff1.w", false),
        ("qry.expand2.w", false),
        ("qry.align2.w", false),
        ("qry.log_tau", false),
        ("qry.size_raw", true),
        ("qry.resid.w", false),
        ("qry.stuff", false),
        ("dec.value.w", false),
        ("dec.0.aw.w", false),
        ("dec.1.off.w", false),
        ("dec.2.cross_out.w", false),
        ("head.sim1.w", false),
        ("head.box2.w", true),
        ("head.mask1.w", false),
        ("head.no_obj", false),
        ("dn.label_embed", false),
    ];
    let mut g_full = Graph::new();
    let loss_full = pipe.forward(&mut g_full, true, true, false);
    g_full.backward(loss_full);
    let mut g_first = Graph::new();
    let loss_first = pipe.forward(&mut g_first, true, true, true);
    g_first.backward(loss_first);

    for (name, first_only) in checked {
        let g = if first_only { &g_first } else { &g_full };
        let pid = pipe.model.pid(name);
        let analytic = g.param_grad(pid).unwrap_or_else(|| panic!("{name} got no gradient")).clone();
        let idx = fdcheck::sample_indices(analytic.rows(), analytic.cols(), 2);
        for (r, c) in idx {
            let orig = pipe.model.store.get(pid).get(r, c);
            let eps = 1e-5;
            pipe.model.store.get_mut(pid).set(r, c, orig + eps);
            let plus = {
                let mut g2 = Graph::new();
                let l = pipe.forward(&mut g2, true, true, first_only);
                g2.value(l).item()
            };
            pipe.model.store.get_mut(pid).set(r, c, orig - eps);
            let minus = {
                let mut g2 = Graph::new();
                let l = pipe.forward(&mut g2, true, true, first_only);
                g2.value(l).item()
            };
            pipe.model.store.get_mut(pid).set(r, c, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = fdcheck::rel_err(analytic.get(r, c), numeric);
            assert!(
                err <= 1e-3,
                "{name}[{r},{c}]: analytic {} vs numeric {numeric} (rel {err})",
                analytic.get(r, c)
            );
        }
    }
}

/// Puts real values in the box residual projection so the layer beneath it
/// sits in the gradient circuit (a fresh model zeroes that projection).
fn energize_box_head(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pid = m.pid("head.box2.w");
    for v in m.store.get_mut(pid).data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
}

#[test]
fn every_parameter_receives_gradient_end_to_end() {
    let mut pipe = Pipeline::new(50);
    energize_box_head(&mut pipe.model, 99);
    let mut g = Graph::new();
    let loss = pipe.forward(&mut g, true, true, false);
    g.backward(loss);
    let mut dead = Vec::new();
    for (pid, name, _) in pipe.model.store.iter() {
        let norm = g.param_grad(pid).map(|t| t.sq_norm()).unwrap_or(0.0);
        if norm == 0.0 {
            dead.push(name.to_string());
        }
    }
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}

#[test]
fn every_parameter_receives_gradient_with_selection_off() {
    let tok = Tokenizer::build(["the red square sits on the floor", "find the target now"]);
    let mut cfg = ModelConfig::desk();
    cfg.query_selection = false;
    let mut model = Model::new(cfg, tok, 51).unwrap();
    energize_box_head(&mut model, 98);
    let pipe = Pipeline {
        model,
        image: RasterImage::filled(64, 48, [90, 40, 200]).unwrap(),
        labels: vec!["red square".into(), "floor".into()],
        response: "a scene. The perception result is <PER>".into(),
    };
    let mut g = Graph::new();
    let loss = pipe.forward(&mut g, true, true, false);
    g.backward(loss);
    let mut dead = Vec::new();
    for (pid, name, _) in pipe.model.store.iter() {
        let norm = g.param_grad(pid).map(|t| t.sq_norm()).unwrap_or(0.0);
        if norm == 0.0 {
            dead.push(name.to_string());
        }
    }
    // With the learnable bank, the summary-expansion perceptron is the one
    // component that is structurally out of the circuit.
    dead.retain(|n| !n.starts_with("qry.expand"));
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}
