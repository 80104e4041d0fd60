// SPDX-License-Identifier: MIT OR Apache-2.0

//! IOI prompts and their ABC partners.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::roles::RoleTable;
use crate::error::{Result, UnpackError};
use crate::model::Tokenizer;

/// Environment variable naming a fixture directory that replaces the
/// built-in fixtures.
pub const FIXTURE_ENV: &str = "UNPACK_FIXTURES";

const NAMES: &str = include_str!("../../fixtures/ioi/names.txt");
const TEMPLATES: &str = include_str!("../../fixtures/ioi/templates.toml");
const ROLES: &str = include_str!("../../fixtures/ioi/roles.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct TemplateFile {
    places: Vec<String>,
    objects: Vec<String>,
    templates: Vec<String>,
}

/// Name pool, templates and role table.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub names: Vec<String>,
    pub templates: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub roles: RoleTable,
    /// sha256 of the three fixture files, for run manifests.
    pub digest: String,
}

impl Fixtures {
    fn parse(names: &str, templates: &str, roles: &str) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let names: Vec<String> = names
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        let t: TemplateFile =
            toml::from_str(templates).map_err(|e| UnpackError::Fixture(format!("templates: {e}")))?;
        for tpl in &t.templates {
            parse_template(tpl)?;
        }
        if t.templates.is_empty() || t.places.is_empty() || t.objects.is_empty() {
            return Err(UnpackError::Fixture(
                "templates, places and objects must be nonempty".into(),
            ));
        }
        let mut h = Sha256::new();
        for part in [names.join("\n").as_str(), templates, roles] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        Ok(Self {
            names,
            templates: t.templates,
            places: t.places,
            objects: t.objects,
            roles: RoleTable::parse(roles)?,
            digest: hex::encode(h.finalize()),
        })
    }

    /// Fixtures compiled into the crate.
    pub fn builtin() -> Self {
        Self::parse(NAMES, TEMPLATES, ROLES).expect("built-in fixtures are valid")
    }

    /// Reads `names.txt`, `templates.toml` and `roles.toml` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |f: &str| {
            let p = dir.join(f);
            std::fs::read_to_string(&p).map_err(|e| UnpackError::io(p, e))
        };
        Self::parse(&read("names.txt")?, &read("templates.toml")?, &read("roles.toml")?)
    }

    /// The directory in [`FIXTURE_ENV`] if set, else the built-in set.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(FIXTURE_ENV) {
            Some(dir) => Self::load(Path::new(&dir)),
            None => Ok(Self::builtin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    A,
    B,
}

/// Checks the `[B] .. [A] .. [B] .. [A]` slot order and the trailing `[A]`.
fn parse_template(t: &str) -> Result<()> {
    let mut order = Vec::new();
    let mut rest = t;
    while let Some(i) = rest.find('[') {
        let j = rest[i..]
            .find(']')
            .ok_or_else(|| UnpackError::Fixture(format!("unclosed slot in `{t}`")))?;
        match &rest[i..i + j + 1] {
            "[A]" => order.push(Piece::A),
            "[B]" => order.push(Piece::B),
            "[PLACE]" | "[OBJECT]" => {}
            other => return Err(UnpackError::Fixture(format!("unknown slot {other} in `{t}`"))),
        }
        rest = &rest[i + j + 1..];
    }
    if order != [Piece::B, Piece::A, Piece::B, Piece::A] || !t.ends_with(" [A]") {
        return Err(UnpackError::Fixture(format!(
            "template must read `[B] .. [A] .. [B] .. [A]` and end with ` [A]`: `{t}`"
        )));
    }
    Ok(())
}

/// Fills the three name slots in order, dropping the final `[A]`.
fn fill(t: &str, names: [&str; 3], place: &str, object: &str) -> (String, [String; 3]) {
    let body = t.strip_suffix(" [A]").expect("validated template");
    let mut out = String::new();
    let mut prefixes: [String; 3] = Default::default();
    let mut slot = 0;
    let mut rest = body;
    while let Some(i) = rest.find('[') {
        let j = rest[i..].find(']').expect("validated template");
        out.push_str(&rest[..i]);
        match &rest[i..i + j + 1] {
            "[PLACE]" => out.push_str(place),
            "[OBJECT]" => out.push_str(object),
            _ => {
                // the separating space belongs to the name's token
                prefixes[slot] = out.trim_end_matches(' ').to_string();
                out.push_str(names[slot]);
                slot += 1;
            }
        }
        rest = &rest[i + j + 1..];
    }
    out.push_str(rest);
    (out, prefixes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Order {
    /// IO is named first.
    Abba,
    /// S is named first.
    Baba,
}

/// Token positions of the named slots; BOS sits at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slots {
    pub io: usize,
    pub s1: usize,
    pub s2: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoiPrompt {
    pub text: String,
    pub template_id: usize,
    pub order: Order,
    pub io: String,
    pub s: String,
    pub io_token: u32,
    pub s_token: u32,
    pub token_ids: Vec<u32>,
    pub slots: Slots,
}

/// The IOI prompt with S1 renamed B and S2 renamed C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcPrompt {
    pub text: String,
    pub template_id: usize,
    pub order: Order,
    pub a: String,
    pub b: String,
    pub c: String,
    pub a_token: u32,
    pub b_token: u32,
    pub c_token: u32,
    pub token_ids: Vec<u32>,
    /// `io` is A, `s1` is B, `s2` is C.
    pub slots: Slots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub ioi: IoiPrompt,
    pub abc: AbcPrompt,
}

impl IoiPrompt {
    /// Rejects prompts whose subject does not repeat.
    pub fn validate(&self) -> Result<()> {
        let ids = &self.token_ids;
        let Slots { io, s1, s2, end } = self.slots;
        let ok = s1 != s2
            && [io, s1, s2].iter().all(|&p| p < end)
            && end + 1 == ids.len()
            && ids[s1] == self.s_token
            && ids[s2] == self.s_token
            && ids[io] == self.io_token
            && self.io_token != self.s_token;
        if ok {
            Ok(())
        } else {
            Err(UnpackError::InvalidArgument(format!(
                "malformed IOI prompt `{}`",
                self.text
            )))
        }
    }
}

fn single_token(tok: &Tokenizer, name: &str) -> Option<u32> {
    match tok.encode(&format!(" {name}"))[..] {
        [id] => Some(id),
        _ => None,
    }
}

fn locate(tok: &Tokenizer, bos: u32, text: &str, prefixes: &[String; 3]) -> (Vec<u32>, [usize; 3]) {
    let mut ids = vec![bos];
    ids.extend(tok.encode(text));
    let pos = prefixes.each_ref().map(|p| 1 + tok.encode(p).len());
    (ids, pos)
}

/// `n` IOI/ABC pairs, deterministic in `seed`, alternating ABBA and BABA.
pub fn gen_prompts(
    tok: &Tokenizer,
    bos: u32,
    fixtures: &Fixtures,
    seed: u64,
    n: usize,
) -> Result<Vec<PromptPair>> {
    let pool: Vec<(&str, u32)> = fixtures
        .names
        .iter()
        .filter_map(|nm| single_token(tok, nm).map(|id| (nm.as_str(), id)))
        .collect();
    if pool.len() < 3 {
        return Err(UnpackError::Fixture(format!(
            "name pool has {} single-token names; need at least 3",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let order = if i % 2 == 0 { Order::Abba } else { Order::Baba };
        let template_id = rng.random_range(0..fixtures.templates.len());
        let tpl = &fixtures.templates[template_id];
        let place = fixtures.places.choose(&mut rng).expect("nonempty");
        let object = fixtures.objects.choose(&mut rng).expect("nonempty");
        let picked: Vec<&(&str, u32)> = pool.choose_multiple(&mut rng, 3).collect();
        let (a, s, c) = (picked[0], picked[1], picked[2]);

        let ioi_names = match order {
            Order::Abba => [a.0, s.0, s.0],
            Order::Baba => [s.0, a.0, s.0],
        };
        let (text, prefixes) = fill(tpl, ioi_names, place, object);
        let (ids, pos) = locate(tok, bos, &text, &prefixes);
        let (io, s1) = match order {
            Order::Abba => (pos[0], pos[1]),
            Order::Baba => (pos[1], pos[0]),
        };
        let ioi = IoiPrompt {
            text,
            template_id,
            order,
            io: a.0.into(),
            s: s.0.into(),
            io_token: a.1,
            s_token: s.1,
            slots: Slots {
                io,
                s1,
                s2: pos[2],
                end: ids.len() - 1,
            },
            token_ids: ids,
        };
        ioi.validate()?;

        let abc_names = match order {
            Order::Abba => [a.0, s.0, c.0],
            Order::Baba => [s.0, a.0, c.0],
        };
        let (text, prefixes) = fill(tpl, abc_names, place, object);
        let (ids, _) = locate(tok, bos, &text, &prefixes);
        let abc = AbcPrompt {
            text,
            template_id,
            order,
            a: a.0.into(),
            b: s.0.into(),
            c: c.0.into(),
            a_token: a.1,
            b_token: s.1,
            c_token: c.1,
            slots: ioi.slots,
            token_ids: ids,
        };
        check_pairing(&ioi, &abc)?;
        out.push(PromptPair { ioi, abc });
    }
    Ok(out)
}

/// Same layout, same non-name tokens, distinct names.
pub fn check_pairing(ioi: &IoiPrompt, abc: &AbcPrompt) -> Result<()> {
    let sl = ioi.slots;
    let names = [sl.io, sl.s1, sl.s2];
    let same_rest = ioi.token_ids.len() == abc.token_ids.len()
        && ioi
            .token_ids
            .iter()
            .zip(&abc.token_ids)
            .enumerate()
            .all(|(p, (x, y))| names.contains(&p) || x == y);
    let ok = same_rest
        && abc.slots == sl
        && abc.token_ids[sl.io] == abc.a_token
        && abc.token_ids[sl.s1] == abc.b_token
        && abc.token_ids[sl.s2] == abc.c_token
        && abc.a_token != abc.b_token
        && abc.b_token != abc.c_token
        && abc.a_token != abc.c_token;
    if ok {
        Ok(())
    } else {
        Err(UnpackError::InvalidArgument(format!(
            "ABC prompt `{}` does not pair with `{}`",
            abc.text, ioi.text
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_drops_final_name() {
        let (t, pre) = fill(
            "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
            ["John", "Mary", "John"],
            "store",
            "drink",
        );
        assert_eq!(t, "Then, John and Mary went to the store. John gave a drink to");
        assert_eq!(pre[0], "Then,");
        assert_eq!(pre[1], "Then, John and");
        assert_eq!(pre[2], "Then, John and Mary went to the store.");
    }

    #[test]
    fn bad_templates_rejected() {
        assert!(parse_template("[A] and [B] went. [B] gave it to [A]").is_err());
        assert!(parse_template("[B] and [A] went. [B] gave it to [A].").is_err());
        assert!(parse_template("[B] and [A] at [CITY]. [B] gave it to [A]").is_err());
    }

    #[test]
    fn builtin_fixtures_parse() {
        let f = Fixtures::builtin();
        assert!(f.names.len() > 100);
        assert_eq!(f.templates.len(), 15);
        assert_eq!(f.roles.roles.len(), 5);
    }
}
