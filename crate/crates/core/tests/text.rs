use mfdcd::backbone::PyramidConfig;
use mfdcd::datakit::{gen_scene, SceneParams};
use mfdcd::pipeline::{Model, ModelConfig};
use mfdcd::tff::{
    descriptor_vocabulary, read_temb, write_temb, EmbeddingProvider, FileEmbedder, StubEmbedder, StubProbabilities,
    TembFile, TextEncoder,
};
use mfdcd::Error;

const DIM: usize = 8;

/// Stub rows for the whole descriptor vocabulary, as an exporter would write them.
fn export_stub(seed: u64) -> (Vec<String>, TembFile) {
    let vocab = descriptor_vocabulary();
    let rows = StubEmbedder::new(DIM, seed).unwrap().embed(&vocab).unwrap();
    let values = rows.rows.data().iter().map(|&v| v as f32).collect();
    (
        vocab.clone(),
        TembFile {
            count: vocab.len(),
            dim: DIM,
            values,
        },
    )
}

#[test]
fn temb_files_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, temb) = export_stub(4);
    let path = tmp.path().join("vocab.temb");
    write_temb(&path, &temb).unwrap();
    let back = read_temb(&path).unwrap();
    assert_eq!(back.count, temb.count);
    assert_eq!(back.dim, DIM);
    let bits = |t: &TembFile| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&temb));
    for i in 0..back.count {
        let norm: f32 = back.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
    }
}

#[test]
fn file_embedder_looks_rows_up_by_descriptor() {
    let (vocab, temb) = export_stub(4);
    let fe = FileEmbedder::new(temb.clone(), Some(DIM))
        .unwrap()
        .with_index(vocab.clone())
        .unwrap();
    let pick = vec![vocab[7].clone(), vocab[2].clone()];
    let m = fe.embed(&pick).unwrap();
    assert_eq!(m.rows.shape(), &[2, DIM]);
    for (r, &i) in [7usize, 2].iter().enumerate() {
        for (a, &b) in m.rows.data()[r * DIM..(r + 1) * DIM].iter().zip(temb.row(i)) {
            assert_eq!(*a, b as f64);
        }
    }
}

#[test]
fn mismatched_files_are_format_errors() {
    let (vocab, temb) = export_stub(4);
    assert!(matches!(
        FileEmbedder::new(temb.clone(), Some(DIM + 1)),
        Err(Error::Format(_))
    ));
    let short = vocab[..vocab.len() - 1].to_vec();
    assert!(matches!(
        FileEmbedder::new(temb.clone(), None).unwrap().with_index(short),
        Err(Error::Format(_))
    ));
    let mut bytes = temb.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(mfdcd::tff::decode_temb(&bytes), Err(Error::Format(_))));
    let bytes = temb.to_bytes();
    assert!(matches!(
        mfdcd::tff::decode_temb(&bytes[..bytes.len() - 2]),
        Err(Error::Format(_))
    ));
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_temb(&tmp.path().join("absent.temb")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn swapping_stub_for_file_rows_keeps_every_shape() {
    let cfg = ModelConfig {
        backbone: PyramidConfig {
            stem_channels: 4,
            stage_channels: [4, 8, 8, 8],
            ..PyramidConfig::default()
        },
        decoder_width: 8,
        embed_dim: DIM,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg).unwrap();
    let scene = gen_scene(
        2,
        &SceneParams {
            size: 64,
            ..SceneParams::default()
        },
    )
    .unwrap();
    let view = [(scene.id.as_str(), &scene.t1, &scene.t2)];
    let stub = TextEncoder::stub(0, DIM).unwrap();
    let (vocab, temb) = export_stub(0);
    let file = TextEncoder {
        probs: Box::new(StubProbabilities::new(0)),
        embed: Box::new(FileEmbedder::new(temb, Some(DIM)).unwrap().with_index(vocab).unwrap()),
    };
    let a = model.input_for(&view, Some(&stub)).unwrap();
    let b = model.input_for(&view, Some(&file)).unwrap();
    for phase in 0..2 {
        let (ta, tb) = (&a.text.as_ref().unwrap()[phase], &b.text.as_ref().unwrap()[phase]);
        assert_eq!(ta.shape(), tb.shape());
        // f32 storage of the exported rows is the only difference
        assert!(ta.max_abs_diff(tb) < 1e-5);
    }
    let (la, lb) = (model.logits(&a, 0).unwrap(), model.logits(&b, 0).unwrap());
    assert_eq!(la.shape(), lb.shape());
    assert_eq!(la.shape(), &[1, 12, 64, 64]);
}
