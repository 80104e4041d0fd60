// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named sets of attention heads.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Result, UnpackError};
use crate::model::{ComponentId, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Role {
    pub name: String,
    pub heads: Vec<ComponentId>,
}

/// Roles in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoleTable {
    pub roles: Vec<Role>,
}

#[derive(Deserialize)]
struct RoleFile {
    role: Vec<RoleEntry>,
}

#[derive(Deserialize)]
struct RoleEntry {
    name: String,
    heads: Vec<String>,
}

impl RoleTable {
    /// Parses `[[role]]` tables with `name` and `heads = ["A9.H9", ...]`.
    pub fn parse(text: &str) -> Result<Self> {
        let file: RoleFile =
            toml::from_str(text).map_err(|e| UnpackError::Fixture(format!("role table: {e}")))?;
        let mut roles = Vec::with_capacity(file.role.len());
        for entry in file.role {
            if roles.iter().any(|r: &Role| r.name == entry.name) {
                return Err(UnpackError::Fixture(format!("duplicate role `{}`", entry.name)));
            }
            let heads = entry
                .heads
                .iter()
                .map(|h| {
                    let id: ComponentId = h.parse()?;
                    if id.is_head() {
                        Ok(id)
                    } else {
                        Err(UnpackError::Fixture(format!("role member `{h}` is not a head")))
                    }
                })
                .collect::<Result<_>>()?;
            roles.push(Role {
                name: entry.name,
                heads,
            });
        }
        Ok(Self { roles })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UnpackError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, name: &str) -> Result<&Role> {
        self.roles
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| UnpackError::InvalidArgument(format!("role `{name}` not in table")))
    }

    pub fn role_of(&self, id: ComponentId) -> Option<&str> {
        self.roles
            .iter()
            .find(|r| r.heads.contains(&id))
            .map(|r| r.name.as_str())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for r in &self.roles {
            for h in &r.heads {
                h.validate(cfg)?;
            }
        }
        Ok(())
    }
}
