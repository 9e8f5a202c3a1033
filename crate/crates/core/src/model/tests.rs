use super::*;
use crate::spans::Span;
use crate::textdata::BOS;

fn micro(seed: u64) -> SemiCausalModel<f64> {
    let mut cfg = ModelConfig::micro(16);
    cfg.init_std = 0.2;
    SemiCausalModel::new(cfg, seed).unwrap()
}

fn ids8() -> Vec<TokenId> {
    vec![BOS, 10, 11, 12, 13, 14, 15, 16]
}

fn value(s: &Session<'_, f64>, v: Var) -> Tensor<f64> {
    s.tape().value(v).clone()
}

#[test]
fn same_seed_same_parameters() {
    let a = micro(5);
    let b = micro(5);
    let c = micro(6);
    for ((pa, pb), pc) in a
        .params()
        .iter()
        .zip(b.params().iter())
        .zip(c.params().iter())
    {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
        if pa.value.numel() > 4 && !pa.name.contains("gain") && !pa.name.contains(".b") {
            assert_ne!(pa.value, pc.value, "{}", pa.name);
        }
    }
}

#[test]
fn encode_span_is_bidirectional() {
    let m = micro(1);
    let span = vec![20, 21, 22, 23];
    let mut s = m.session();
    let base = s
        .encode_span(&EncoderInput::tokens("text", span.clone()))
        .unwrap();
    let base = value(&s, base);
    assert_eq!(base.shape(), &[4, 12]);
    // Changing the last token must move the first row too.
    let mut s = m.session();
    let moved = s
        .encode_span(&EncoderInput::tokens("text", vec![20, 21, 22, 99]))
        .unwrap();
    let moved = value(&s, moved);
    assert_ne!(base.row(0), moved.row(0));
}

#[test]
fn encode_span_rejects_bad_inputs() {
    let m = micro(1);
    let mut s = m.session();
    assert!(matches!(
        s.encode_span(&EncoderInput::tokens("text", vec![])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        s.encode_span(&EncoderInput::tokens("text", vec![1; 17])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        s.encode_span(&EncoderInput::tokens("audio", vec![1])),
        Err(Error::Registry(_))
    ));
    let feats = EncoderInput::features("text", Tensor::zeros(&[2, 3]));
    assert!(matches!(s.encode_span(&feats), Err(Error::Registry(_))));
}

#[test]
fn zero_connector_outputs_zero() {
    let mut m = micro(2);
    m.params_mut()
        .assign("connector.text.w", Tensor::zeros(&[12, 16]))
        .unwrap();
    m.params_mut()
        .assign("connector.text.b", Tensor::zeros(&[16]))
        .unwrap();
    let mut s = m.session();
    let reps = s
        .encode_span(&EncoderInput::tokens("text", vec![1, 2, 3]))
        .unwrap();
    let out = s.connect("text", reps).unwrap();
    assert!(s.tape().value(out).data().iter().all(|v| *v == 0.0));
}

#[test]
fn identity_connector_passes_rows_through() {
    let mut cfg = ModelConfig::micro(16);
    cfg.modalities[0].encoder.hidden = 16;
    let mut m = SemiCausalModel::<f64>::new(cfg, 3).unwrap();
    let eye: Vec<f64> = (0..256)
        .map(|i| if i / 16 == i % 16 { 1.0 } else { 0.0 })
        .collect();
    m.params_mut()
        .assign("connector.text.w", Tensor::new(vec![16, 16], eye).unwrap())
        .unwrap();
    m.params_mut()
        .assign("connector.text.b", Tensor::zeros(&[16]))
        .unwrap();
    let mut s = m.session();
    let reps = s
        .encode_span(&EncoderInput::tokens("text", vec![1, 2, 3]))
        .unwrap();
    let out = s.connect("text", reps).unwrap();
    assert_eq!(s.tape().value(out), s.tape().value(reps));
}

#[test]
fn connector_rejects_wrong_width() {
    let m = micro(2);
    let mut s = m.session();
    let wrong = s.tape_mut().constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(s.connect("text", wrong), Err(Error::Dimension(_))));
}

#[test]
fn empty_layout_inputs_are_scaled_embeddings_plus_positions() {
    let m = micro(4);
    let ids = ids8();
    let mut s = m.session();
    let x = s.assemble_inputs(&ids, &SpanLayout::empty(8), &[]).unwrap();
    let x = value(&s, x);
    let pos: Tensor<f64> = sinusoidal_positions(8, 16);
    let e = &m.params().get(m.embedding_id()).value;
    for (r, id) in ids.iter().enumerate() {
        for c in 0..16 {
            assert_eq!(x.row(r)[c], 4.0 * e.row(*id as usize)[c] + pos.row(r)[c]);
        }
    }
}

#[test]
fn span_rows_come_from_connector() {
    let m = micro(4);
    let ids = ids8();
    let layout = SpanLayout::new(8, vec![Span::new(4, 7)]).unwrap();
    let docked = m.text_docking(&ids, &layout).unwrap();
    let mut s = m.session();
    let x = s.assemble_inputs(&ids, &layout, &docked).unwrap();
    let reps = s.encode_span(&docked[0]).unwrap();
    let conn = s.connect("text", reps).unwrap();
    let x = value(&s, x);
    let conn = value(&s, conn);
    let pos: Tensor<f64> = sinusoidal_positions(8, 16);
    let e = &m.params().get(m.embedding_id()).value;
    // Token rows are scaled by sqrt(16) = 4, exact in floating point.
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..16 {
            let base = if (3..6).contains(&r) {
                conn.row(r - 3)[c]
            } else {
                4.0 * e.row(id as usize)[c]
            };
            assert_eq!(x.row(r)[c], base + pos.row(r)[c]);
        }
    }
}

#[test]
fn mismatched_docking_is_rejected() {
    let m = micro(4);
    let ids = ids8();
    let layout = SpanLayout::new(8, vec![Span::new(4, 7)]).unwrap();
    let mut s = m.session();
    assert!(matches!(
        s.assemble_inputs(&ids, &layout, &[]),
        Err(Error::Dimension(_))
    ));
    let short = vec![EncoderInput::tokens("text", vec![1, 2])];
    assert!(matches!(
        s.assemble_inputs(&ids, &layout, &short),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        s.assemble_inputs(&ids[..7], &layout, &short),
        Err(Error::Dimension(_))
    ));
    let mut long = ids8();
    long.extend([1; 10]);
    assert!(matches!(
        m.logits(&long, &SpanLayout::empty(18)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn decoder_is_causal() {
    let m = micro(7);
    let ids = ids8();
    let base = m.logits(&ids, &SpanLayout::empty(8)).unwrap();
    let mut changed = ids.clone();
    changed[5] = 99;
    let out = m.logits(&changed, &SpanLayout::empty(8)).unwrap();
    for r in 0..8 {
        assert_eq!(base.row(r) == out.row(r), r < 5, "row {r}");
    }
}

#[test]
fn output_projection_is_the_embedding() {
    let mut m = micro(8);
    assert!(m
        .params()
        .iter()
        .all(|p| !p.name.contains("unembed") && !p.name.contains("lm_head")));
    let ids = ids8();
    let base = m.logits(&ids, &SpanLayout::empty(8)).unwrap();
    // Changing an embedding row that no input uses moves only that logit column.
    let id = m.embedding_id();
    m.params_mut().get_mut(id).value.data_mut()[200 * 16] += 1.0;
    let out = m.logits(&ids, &SpanLayout::empty(8)).unwrap();
    for r in 0..8 {
        for v in 0..m.config().vocab {
            assert_eq!(base.row(r)[v] == out.row(r)[v], v != 200, "row {r} col {v}");
        }
    }
}

fn brute_force_loss(logits: &Tensor<f64>, ids: &[TokenId], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for &t in targets {
        let row = logits.row(t - 2);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[ids[t - 1] as usize].exp() / z).ln();
    }
    total / targets.len() as f64
}

#[test]
fn loss_scores_the_expected_targets() {
    let m = micro(9);
    let ids = ids8();
    let seq = PackedSequence::single(ids.clone());
    let layout = SpanLayout::new(8, vec![Span::new(4, 6)]).unwrap();
    let logits = m.logits(&ids, &layout).unwrap();
    let expected = brute_force_loss(&logits, &ids, &[2, 3, 4, 6, 7, 8]);
    let got = m.semicausal_loss(&seq, &layout).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn empty_layout_loss_is_causal_lm_loss() {
    let m = micro(10);
    let seq = PackedSequence::single(ids8());
    let a = m.semicausal_loss(&seq, &SpanLayout::empty(8)).unwrap();
    let b = m.causal_lm_loss(&seq).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_needs_a_target() {
    let m = micro(10);
    let seq = PackedSequence::single(vec![BOS]);
    assert!(matches!(
        m.semicausal_loss(&seq, &SpanLayout::empty(1)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn spans_encode_independently() {
    let m = micro(11);
    let a = vec![BOS, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    let mut b = a.clone();
    b[3] = 77; // inside the first span only
    let layout = SpanLayout::new(10, vec![Span::new(3, 5), Span::new(7, 10)]).unwrap();
    let da = m.text_docking(&a, &layout).unwrap();
    let db = m.text_docking(&b, &layout).unwrap();
    let mut s = m.session();
    let ra = s.encode_span(&da[1]).unwrap();
    let rb = s.encode_span(&db[1]).unwrap();
    assert_eq!(s.tape().value(ra), s.tape().value(rb));
    let report = m.information_flow_check(&a, &layout, &da).unwrap();
    assert!(report.is_clean(), "{:?}", report.violations);
    // Position 4 (row 3) sees the whole first span, including its last token.
    assert!(report.moved(2, 3));
}

#[test]
fn vector_modality_docks_alongside_text() {
    let mut cfg = ModelConfig::micro(16);
    cfg.init_std = 0.2;
    let mut vision = cfg.modalities[0].clone();
    vision.name = "vision".into();
    vision.input = InputKind::Vector { width: 5 };
    vision.connector = ConnectorKind::Mlp;
    cfg.modalities.push(vision);
    let m = SemiCausalModel::<f64>::new(cfg, 12).unwrap();
    assert_eq!(m.modalities().collect::<Vec<_>>(), ["text", "vision"]);
    let ids = ids8();
    let layout = SpanLayout::new(8, vec![Span::new(2, 4), Span::new(5, 8)]).unwrap();
    let feats = Tensor::new(vec![3, 5], (0..15).map(|i| i as f64 / 10.0).collect()).unwrap();
    let docked = vec![
        EncoderInput::tokens("text", vec![10, 11]),
        EncoderInput::features("vision", feats),
    ];
    let report = m.information_flow_check(&ids, &layout, &docked).unwrap();
    assert!(report.is_clean(), "{:?}", report.violations);
    assert!(report.moved(7, 5));
}

#[test]
fn training_session_dropout_is_seeded() {
    let mut cfg = ModelConfig::micro(16);
    cfg.modalities[0].encoder.dropout = 0.5;
    let m = SemiCausalModel::<f64>::new(cfg, 13).unwrap();
    let ids = ids8();
    let layout = SpanLayout::new(8, vec![Span::new(3, 7)]).unwrap();
    let docked = m.text_docking(&ids, &layout).unwrap();
    let run = |seed| {
        let mut s = m.training_session(seed);
        let v = s.logits(&ids, &layout, &docked).unwrap();
        s.tape().value(v).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    // Evaluation sessions never drop.
    let a = m.logits(&ids, &layout).unwrap();
    assert_eq!(a, m.logits(&ids, &layout).unwrap());
}

#[test]
fn gradients_reach_every_parameter_or_report_zeros() {
    let m = micro(14);
    let seq = PackedSequence::single(ids8());
    let layout = SpanLayout::new(8, vec![Span::new(3, 6)]).unwrap();
    let docked = m.text_docking(&seq.ids, &layout).unwrap();
    let mut s = m.gradient_session();
    let loss = s.semicausal_loss(&seq, &layout, &docked).unwrap();
    s.backward(loss).unwrap();
    let grads = s.param_grads();
    assert_eq!(grads.len(), m.params().len());
    for (p, g) in m.params().iter().zip(&grads) {
        let g = g.as_ref().unwrap();
        assert_eq!(g.shape(), p.value.shape(), "{}", p.name);
    }
    let conn = m.params().id("connector.text.w").unwrap();
    assert!(grads[conn.index()]
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .any(|v| *v != 0.0));
}
