mod common;

use common::{gpt2_tokenizer, gpt2_toy, toy_roles, GPT2_BOS};
use unpack::attribution::{Target, TraceConfig, CONFIG_NAMES};
use unpack::eval::report::{write_beta_table, write_token_table};
use unpack::eval::{
    beta_sweep, check_pairing, composition_verification, default_claims, evaluate, gen_prompts, Fixtures, Order,
};
use unpack::model::BlockLayout;

fn configs() -> Vec<TraceConfig> {
    CONFIG_NAMES
        .iter()
        .map(|n| TraceConfig::named(n, Target::Single { token: 0 }).unwrap())
        .collect()
}

#[test]
fn prompts_are_deterministic_and_paired() {
    let tok = gpt2_tokenizer();
    let fx = Fixtures::builtin();
    let a = gen_prompts(&tok, GPT2_BOS, &fx, 42, 40).unwrap();
    let b = gen_prompts(&tok, GPT2_BOS, &fx, 42, 40).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_prompts(&tok, GPT2_BOS, &fx, 43, 40).unwrap());
    let abba = a.iter().filter(|p| p.ioi.order == Order::Abba).count();
    assert_eq!(abba, 20);
    for (i, p) in a.iter().enumerate() {
        let ioi = &p.ioi;
        ioi.validate().unwrap();
        check_pairing(ioi, &p.abc).unwrap();
        assert_eq!(ioi.token_ids[0], GPT2_BOS);
        assert_eq!(ioi.token_ids[ioi.slots.s1], ioi.token_ids[ioi.slots.s2]);
        assert_eq!(ioi.order, if i % 2 == 0 { Order::Abba } else { Order::Baba });
        assert_eq!(ioi.slots.io < ioi.slots.s1, ioi.order == Order::Abba);
        let names = [p.abc.a_token, p.abc.b_token, p.abc.c_token];
        assert!(names[0] != names[1] && names[1] != names[2] && names[0] != names[2]);
        assert_eq!(tok.encode(&ioi.text), ioi.token_ids[1..]);
    }
}

#[test]
fn evaluation_is_bounded_and_reproducible() {
    let m = gpt2_toy(BlockLayout::Sequential, 5);
    let pairs = gen_prompts(m.tokenizer.as_ref().unwrap(), GPT2_BOS, &Fixtures::builtin(), 1, 6).unwrap();
    let cfgs = configs();
    let first = evaluate(&m, &pairs, &cfgs).unwrap();
    let again = evaluate(&m, &pairs, &cfgs).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.len(), CONFIG_NAMES.len());
    for (r, name) in first.iter().zip(CONFIG_NAMES) {
        assert_eq!(r.label, name);
        let mt = r.metrics;
        assert_eq!(mt.n, pairs.len());
        for f in [mt.io_gt_s1, mt.io_gt_s2, mt.top1, mt.top1_star] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert!(mt.mean_io_share <= 100.0 && mt.mean_io_share.is_finite());
        assert!(mt.mean_p_io > 0.0 && mt.mean_p_io < 1.0);
        let sp = r.suppression;
        for f in [sp.c_to_c, sp.s2_to_s, sp.c_to_b, sp.s1_to_s] {
            assert!(f <= 100.0 && f.is_finite());
        }
        assert_eq!(sp.s1_s2_gap, sp.s1_to_s - sp.s2_to_s);
    }
    // probabilities do not depend on the attribution config
    assert!(first.iter().all(|r| r.metrics.mean_p_io == first[0].metrics.mean_p_io));

    let mut table = Vec::new();
    write_token_table(&mut table, &first, &[("model", "toy".into())]).unwrap();
    let text = String::from_utf8(table).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + CONFIG_NAMES.len());
    assert!(rows[0].starts_with("Configuration\t"));
}

#[test]
fn beta_sweep_matches_single_runs() {
    let m = gpt2_toy(BlockLayout::Parallel, 8);
    let pairs = gen_prompts(m.tokenizer.as_ref().unwrap(), GPT2_BOS, &Fixtures::builtin(), 3, 4).unwrap();
    let base = TraceConfig::named("kqv_aligned", Target::Single { token: 0 }).unwrap();
    let betas = [0.0, 0.5, 1.0];
    let rows = beta_sweep(&m, &pairs, &base, &betas).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, &beta) in rows.iter().zip(&betas) {
        assert_eq!(row.beta, beta);
        let single = evaluate(&m, &pairs, &[TraceConfig { beta, ..base.clone() }]).unwrap();
        assert_eq!(single[0].metrics, row.metrics);
        assert_eq!(single[0].suppression, row.suppression);
    }
    let mut out = Vec::new();
    write_beta_table(&mut out, &rows, &[]).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn composition_cells_cover_every_claim_and_role() {
    let m = gpt2_toy(BlockLayout::Sequential, 13);
    let pairs = gen_prompts(m.tokenizer.as_ref().unwrap(), GPT2_BOS, &Fixtures::builtin(), 7, 3).unwrap();
    let roles = toy_roles();
    let claims = default_claims();
    let cfg = TraceConfig::named("kqv_aligned", Target::Single { token: 0 }).unwrap();
    let cells = composition_verification(&m, &pairs, &cfg, &roles, &claims).unwrap();
    assert_eq!(cells.len(), 4 * claims.len() * roles.roles.len());
    assert_eq!(cells, composition_verification(&m, &pairs, &cfg, &roles, &claims).unwrap());
    for c in &cells {
        let heads = roles.get(&c.root_role).unwrap().heads.len();
        assert_eq!(c.n_rerootings, pairs.len() * heads);
        assert!(c.n_found <= c.n_rerootings);
        assert_eq!(c.median_rank.is_some(), c.n_found > 0);
        assert!(c.median_rank.is_none_or(|r| (1..=100).contains(&r)));
        // the induction root sits in layer 1; nothing at or above the floor precedes it
        if c.root_role == "Ind" {
            assert!(!c.applicable);
        }
        if c.root_role == "NM" && c.upstream_role == "Ind" {
            assert!(c.applicable);
        }
        if !c.applicable {
            assert_eq!(c.display(), "--");
        }
    }
}

#[test]
fn unknown_root_role_is_rejected() {
    let m = gpt2_toy(BlockLayout::Sequential, 13);
    let pairs = gen_prompts(m.tokenizer.as_ref().unwrap(), GPT2_BOS, &Fixtures::builtin(), 7, 1).unwrap();
    let cfg = TraceConfig::named("kqv_aligned", Target::Single { token: 0 }).unwrap();
    let gpt2_roles = Fixtures::builtin().roles;
    assert!(composition_verification(&m, &pairs, &cfg, &gpt2_roles, &default_claims()).is_err());
}
