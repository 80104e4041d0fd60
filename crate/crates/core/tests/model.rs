use std::path::PathBuf;

use unpack::model::container::{load_logit_fixtures, LogitFixture, MANIFEST_FILE, WEIGHTS_FILE};
use unpack::model::toy::ToySpec;
use unpack::model::{load_model, save_model, BlockLayout, CaptureFlags, PositionScheme, Tokenizer};
use unpack::UnpackError;

fn gpt2_tokenizer() -> Tokenizer {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/gpt2");
    Tokenizer::from_files(&dir.join("vocab.json"), &dir.join("merges.txt")).unwrap()
}

#[test]
fn gpt2_tokenizer_matches_reference_ids() {
    let tok = gpt2_tokenizer();
    assert_eq!(tok.vocab_len(), 50257);
    assert_eq!(tok.encode(" Alice"), vec![14862]);
    assert_eq!(tok.token_id("ĠAlice"), Some(14862));
    assert_eq!(tok.encode("Hello world"), vec![15496, 995]);
    assert_eq!(
        tok.encode("Then, Mary and John went to the store. John gave a drink to"),
        vec![6423, 11, 5335, 290, 1757, 1816, 284, 262, 3650, 13, 1757, 2921, 257, 4144, 284]
    );
    assert_eq!(
        tok.encode("I'm here  twice\n\nok 123456 ünïcödé 😀"),
        vec![40, 1101, 994, 220, 5403, 198, 198, 482, 17031, 29228, 6184, 120, 77, 26884, 66, 9101, 67, 2634, 30325, 222]
    );
}

#[test]
fn gpt2_tokenizer_round_trips_text() {
    let tok = gpt2_tokenizer();
    for text in ["Hello world", " leading space", "tabs\tand\nnewlines", "ünïcödé 😀 mixed 42"] {
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }
}

fn toy(layout: BlockLayout, rotary: bool) -> unpack::model::Model {
    ToySpec {
        block_layout: layout,
        position_scheme: if rotary {
            PositionScheme::Rotary {
                fraction: 0.25,
                base: 10_000.0,
            }
        } else {
            PositionScheme::Learned
        },
        unembed_bias: true,
        seed: 9,
        ..ToySpec::default()
    }
    .build()
    .unwrap()
}

#[test]
fn container_round_trip_is_exact() {
    for (layout, rotary) in [(BlockLayout::Sequential, false), (BlockLayout::Parallel, true)] {
        let m = toy(layout, rotary);
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        let (a, b) = (m.weights.flat_tensors(), back.weights.flat_tensors());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let ids = back.tokenize_with_bos("round trip").unwrap();
        assert_eq!(ids, m.tokenize_with_bos("round trip").unwrap());
        let l1 = m.forward(&ids, CaptureFlags::LOGITS_ONLY).unwrap().logits;
        let l2 = back.forward(&ids, CaptureFlags::LOGITS_ONLY).unwrap().logits;
        assert_eq!(l1, l2);

        let dir2 = tempfile::tempdir().unwrap();
        save_model(&back, dir2.path()).unwrap();
        let read = |d: &std::path::Path| std::fs::read(d.join(WEIGHTS_FILE)).unwrap();
        assert_eq!(read(dir.path()), read(dir2.path()));
    }
}

#[test]
fn corrupted_containers_are_rejected() {
    let m = toy(BlockLayout::Sequential, false);
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let blob = dir.path().join(WEIGHTS_FILE);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load_model(dir.path()), Err(UnpackError::Checksum { .. })));

    save_model(&m, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("blocks.1.mlp.w_down", "blocks.1.mlp.w_out", 1)).unwrap();
    let err = load_model(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    std::fs::write(&manifest, text.replace("format_version = 1", "format_version = 7")).unwrap();
    assert!(matches!(load_model(dir.path()), Err(UnpackError::Manifest(_))));

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(missing.path()), Err(UnpackError::Io { .. })));
}

#[test]
fn logit_fixtures_round_trip() {
    let m = toy(BlockLayout::Sequential, false);
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let ids = m.tokenize_with_bos("fixture").unwrap();
    let last = m.forward(&ids, CaptureFlags::LOGITS_ONLY).unwrap().logits.row(ids.len() - 1).to_vec();
    let fx = LogitFixture {
        token_ids: ids.clone(),
        logits: last.clone(),
    };
    std::fs::create_dir_all(dir.path().join("fixtures")).unwrap();
    std::fs::write(dir.path().join("fixtures/logits_00.bin"), fx.to_bytes()).unwrap();
    let loaded = load_logit_fixtures(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].1, fx);
    let back = load_model(dir.path()).unwrap();
    let again = back.forward(&loaded[0].1.token_ids, CaptureFlags::LOGITS_ONLY).unwrap();
    assert_eq!(again.logits.row(ids.len() - 1).to_vec(), last);
    assert!(LogitFixture::from_bytes(b"ULOG\x01\0\0\0").is_err());
}
