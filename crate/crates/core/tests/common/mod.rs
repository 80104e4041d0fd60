#![allow(dead_code)]

use std::path::PathBuf;

use unpack::eval::RoleTable;
use unpack::model::toy::ToySpec;
use unpack::model::{BlockLayout, Model, Tokenizer};

pub const GPT2_BOS: u32 = 50256;

pub fn gpt2_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/gpt2")
}

pub fn gpt2_tokenizer() -> Tokenizer {
    let dir = gpt2_dir();
    Tokenizer::from_files(&dir.join("vocab.json"), &dir.join("merges.txt")).unwrap()
}

/// A small random model over the GPT-2 vocabulary.
pub fn gpt2_toy(layout: BlockLayout, seed: u64) -> Model {
    let mut m = ToySpec {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 50257,
        n_ctx: 48,
        block_layout: layout,
        seed,
        ..ToySpec::default()
    }
    .build()
    .unwrap();
    m.config.bos_token_id = GPT2_BOS;
    m.tokenizer = Some(gpt2_tokenizer());
    m
}

/// Roles laid out over a three-layer, two-head model.
pub fn toy_roles() -> RoleTable {
    RoleTable::parse(
        r#"
[[role]]
name = "NM"
heads = ["A2.H0"]

[[role]]
name = "S-Inh"
heads = ["A2.H1", "A1.H1"]

[[role]]
name = "Ind"
heads = ["A1.H0"]

[[role]]
name = "Dup"
heads = ["A0.H0", "A0.H1"]
"#,
    )
    .unwrap()
}
