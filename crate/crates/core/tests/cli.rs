mod common;

use std::path::Path;
use std::process::Command;

use common::gpt2_toy;
use unpack::model::{save_model, BlockLayout};

fn unpack(args: &[&str]) -> (i32, String) {
    unpack_env(args, &[])
}

fn unpack_env(args: &[&str], env: &[(&str, &Path)]) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unpack"));
    cmd.args(args).env_remove("UNPACK_FIXTURES");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn byte_toy(dir: &Path) -> std::path::PathBuf {
    let model = dir.join("toy");
    let (code, err) = unpack(&["make-toy", "--layers", "2", "--heads", "2", "--seed", "3", "--output", s(&model)]);
    assert_eq!(code, 0, "{err}");
    model
}

#[test]
fn trace_and_reroot_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let model = byte_toy(tmp.path());
    let out = tmp.path().join("trace");
    let (code, err) = unpack(&["trace", "--model", s(&model), "--text", "The cat sat", "--output", s(&out)]);
    assert_eq!(code, 0, "{err}");
    for f in ["token_credit.tsv", "paths.jsonl", "summary.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["subcommand"], "trace");
    assert_eq!(manifest["configs"][0]["beta"], 0.8);
    serde_json::from_str::<serde_json::Value>(&read(&out.join("summary.json"))).unwrap();
    let credit = read(&out.join("token_credit.tsv"));
    assert_eq!(data_rows(&credit).len(), 1 + 1 + "The cat sat".len());
    for line in read(&out.join("paths.jsonl")).lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let rr = tmp.path().join("reroot");
    let (code, err) = unpack(&[
        "reroot", "--model", s(&model), "--ids", "256,72,105,33", "--component", "A1.H0", "--mode", "K", "--output",
        s(&rr),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(read(&rr.join("upstream.tsv")).starts_with("rank\tcomponent\trole\tcredit"));
}

#[test]
fn invalid_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let model = byte_toy(tmp.path());
    let out = s(&tmp.path().join("o")).to_string();
    let (code, err) = unpack(&["trace", "--model", s(&model), "--text", "x", "--config", "bogus", "--output", &out]);
    assert_eq!(code, 2);
    assert!(err.contains("kqv_aligned") && err.contains("k_only_l2"), "{err}");
    assert_eq!(unpack(&["trace", "--model", s(&model), "--output", &out, "--nope"]).0, 2);
    let (code, _) = unpack(&["reroot", "--model", s(&model), "--text", "ab", "--component", "emb", "--output", &out]);
    assert_eq!(code, 2);
    let (code, _) = unpack(&["trace", "--model", s(&model), "--text", "ab", "--beta=-0.5", "--output", &out]);
    assert_eq!(code, 2);
    let missing = tmp.path().join("absent");
    assert_eq!(unpack(&["trace", "--model", s(&missing), "--text", "ab", "--output", &out]).0, 2);
    let corpus = s(&missing.join("c.txt")).to_string();
    assert_eq!(unpack(&["knockout", "--model", s(&model), "--corpus", &corpus, "--output", &out]).0, 2);

    std::fs::write(model.join("weights.bin"), b"garbage").unwrap();
    assert_eq!(unpack(&["trace", "--model", s(&model), "--text", "ab", "--output", &out]).0, 3);
}

#[test]
fn knockout_and_score_on_a_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let model = byte_toy(tmp.path());
    let corpus = tmp.path().join("corpus.txt");
    std::fs::write(&corpus, "the quick brown fox\njumps over\n\nthe lazy dog again\n").unwrap();
    let out = tmp.path().join("ko");
    let (code, err) = unpack(&[
        "knockout", "--model", s(&model), "--corpus", s(&corpus), "--per-layer", "2", "--jobs", "2", "--output", s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = read(&out.join("knockout.tsv"));
    let rows = data_rows(&rows);
    assert!(rows[0].starts_with("component\tchannel\tstrength\tdelta_ppl"));
    // emb and two per layer on cut_mlp; emb, two from layer 0 on cut_attention
    assert_eq!(rows.len() - 1, 5 + 3);
    assert!(out.join("correlations.tsv").is_file());

    let sc = tmp.path().join("score");
    let (code, err) = unpack(&["score", "--model", s(&model), "--corpus", s(&corpus), "--output", s(&sc)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(data_rows(&read(&sc.join("strength.tsv"))).len(), 1 + 7);
    assert!(sc.join("panel.tsv").is_file());
}

fn eval_fixture(dir: &Path) -> std::path::PathBuf {
    let fx = dir.join("fixtures");
    std::fs::create_dir_all(&fx).unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ioi");
    for f in ["names.txt", "templates.toml"] {
        std::fs::copy(src.join(f), fx.join(f)).unwrap();
    }
    std::fs::write(
        fx.join("roles.toml"),
        "[[role]]\nname = \"NM\"\nheads = [\"A2.H0\"]\n\n[[role]]\nname = \"S-Inh\"\nheads = [\"A2.H1\", \"A1.H1\"]\n\n\
         [[role]]\nname = \"Ind\"\nheads = [\"A1.H0\"]\n",
    )
    .unwrap();
    fx
}

#[test]
fn eval_writes_tables_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("gpt2-toy");
    save_model(&gpt2_toy(BlockLayout::Sequential, 5), &model).unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["eval", "--model", s(&model), "--n", "4", "--output", s(&out)];
        args.extend_from_slice(extra);
        let (code, err) = unpack(&args);
        assert_eq!(code, 0, "{err}");
        out
    };
    let a = run("a", &["--jobs", "2"]);
    let b = run("b", &[]);
    for f in ["reports.jsonl", "prompts.jsonl", "token_attribution.tsv", "s2_suppression.tsv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let table = read(&a.join("token_attribution.tsv"));
    assert!(table.contains("# ") && table.contains("Configuration\tIO>S1"));
    assert_eq!(data_rows(&table).len(), 7);
    assert_eq!(data_rows(&read(&a.join("model_token_attribution.tsv")))[1].split('\t').next(), Some("gpt2-toy"));

    let sweep = run("sweep", &["--beta-sweep", "0:1:0.5"]);
    assert_eq!(data_rows(&read(&sweep.join("beta_sweep.tsv"))).len(), 4);

    let fx = eval_fixture(tmp.path());
    let out = tmp.path().join("comp");
    let (code, err) = unpack_env(
        &["eval", "--model", s(&model), "--n", "2", "--composition", "--output", s(&out)],
        &[("UNPACK_FIXTURES", &fx)],
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(read(&out.join("composition.jsonl")).lines().count(), 4 * 3 * 3);
    assert!(out.join("composition_summary.tsv").is_file());
    let (code, _) = unpack(&["eval", "--model", s(&model), "--n", "2", "--composition", "--output", s(&out)]);
    assert_eq!(code, 2, "GPT-2 role heads do not fit the toy");
}
