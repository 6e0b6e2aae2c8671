//! JSON network description files.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::builtin::{self, LinearOracle, RingParams};
use super::external::ProcessOracle;
use super::{assemble_network, BlackBoxSubsystem, NetworkDef, NetworkTopology};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsystemKind {
    Linear,
    Ring,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    pub kind: SubsystemKind,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// `edges` holds `[i, j]` pairs meaning subsystem `i` reads the state of `j`.
/// Sources of one subsystem are stacked in the order their edges appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub subsystems: Vec<SubsystemSpec>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Deserialize)]
struct ExternalParams {
    command: String,
    #[serde(default)]
    args: Vec<String>,
}

impl SubsystemSpec {
    pub fn instantiate(&self, index: usize) -> Result<BlackBoxSubsystem> {
        let sub = match self.kind {
            SubsystemKind::Linear => {
                let oracle: LinearOracle = serde_json::from_value(self.params.clone())
                    .map_err(|e| Error::InvalidArgument(format!("linear params of {}: {e}", self.id)))?;
                let oracle = LinearOracle::new(oracle.a, oracle.b)?;
                builtin::linear_subsystem(index, oracle)
            }
            SubsystemKind::Ring => {
                let params = if self.params.is_null() {
                    RingParams::default()
                } else {
                    serde_json::from_value(self.params.clone()).map_err(|e| {
                        Error::InvalidArgument(format!("ring params of {}: {e}", self.id))
                    })?
                };
                builtin::ring_subsystem_with(index, params)
            }
            SubsystemKind::External => {
                let ext: ExternalParams = serde_json::from_value(self.params.clone())
                    .map_err(|e| Error::InvalidArgument(format!("external params of {}: {e}", self.id)))?;
                let signature = format!("external:{}:{}", ext.command, ext.args.join(" "));
                BlackBoxSubsystem::new(
                    index,
                    self.n,
                    self.p,
                    Arc::new(ProcessOracle::new(ext.command, ext.args)),
                )?
                .with_signature(signature)
            }
        };
        if sub.n != self.n || sub.p != self.p {
            return Err(Error::InvalidArgument(format!(
                "subsystem {} declares n={}, p={} but its parameters imply n={}, p={}",
                self.id, self.n, self.p, sub.n, sub.p
            )));
        }
        Ok(sub)
    }
}

impl NetworkDescription {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    /// Positions of subsystems follow their order in the file; edges refer to ids.
    pub fn build(&self) -> Result<NetworkDef> {
        let m = self.subsystems.len();
        let index_of = |id: usize| {
            self.subsystems
                .iter()
                .position(|s| s.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("edge references unknown id {id}")))
        };
        for (k, s) in self.subsystems.iter().enumerate() {
            if self.subsystems[..k].iter().any(|t| t.id == s.id) {
                return Err(Error::InvalidArgument(format!("duplicate subsystem id {}", s.id)));
            }
        }
        let mut edges = vec![Vec::new(); m];
        for &[i, j] in &self.edges {
            edges[index_of(i)?].push(index_of(j)?);
        }
        let subs = self
            .subsystems
            .iter()
            .enumerate()
            .map(|(k, s)| s.instantiate(k))
            .collect::<Result<Vec<_>>>()?;
        assemble_network(subs, NetworkTopology::new(edges)?)
    }

    pub fn ring(m: usize) -> Self {
        Self {
            subsystems: (0..m)
                .map(|id| SubsystemSpec {
                    id,
                    n: 2,
                    p: 2,
                    kind: SubsystemKind::Ring,
                    params: serde_json::Value::Null,
                })
                .collect(),
            edges: (0..m).map(|i| [i, (i + m - 1) % m]).collect(),
        }
    }

    pub fn two_subsystem() -> Self {
        let subsystems = builtin::two_subsystem_oracles()
            .into_iter()
            .enumerate()
            .map(|(id, o)| SubsystemSpec {
                id,
                n: 2,
                p: 2,
                kind: SubsystemKind::Linear,
                params: serde_json::to_value(o).expect("matrices serialize"),
            })
            .collect();
        Self {
            subsystems,
            edges: vec![[0, 1], [1, 0]],
        }
    }

    /// Replaces the subsystem list with `m` copies of the first entry wired in a ring.
    pub fn resized_ring(&self, m: usize) -> Result<Self> {
        let proto = self
            .subsystems
            .first()
            .ok_or_else(|| Error::InvalidArgument("description has no subsystems".into()))?;
        Ok(Self {
            subsystems: (0..m)
                .map(|id| SubsystemSpec {
                    id,
                    ..proto.clone()
                })
                .collect(),
            edges: (0..m).map(|i| [i, (i + m - 1) % m]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_subsystem_description_round_trips_and_builds() {
        let d = NetworkDescription::two_subsystem();
        let back: NetworkDescription = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(back, d);
        let net = back.build().unwrap();
        let direct = builtin::two_subsystem_network();
        let x = [0.4, -1.0, 2.0, 0.5];
        assert_eq!(net.step(&x).unwrap(), direct.step(&x).unwrap());
    }

    #[test]
    fn ring_description_matches_builtin_ring() {
        let net = NetworkDescription::ring(4).build().unwrap();
        let direct = builtin::ring_network(4).unwrap();
        let x: Vec<f64> = (0..8).map(|k| k as f64 - 3.5).collect();
        assert_eq!(net.step(&x).unwrap(), direct.step(&x).unwrap());
    }

    #[test]
    fn ring_params_can_be_overridden() {
        let json = r#"{"subsystems":[{"id":0,"n":2,"p":0,"kind":"ring","params":{"a11":0.5,"c":0.0,"b1":0.0,"a22":0.5,"a21":0.0,"b2":0.0}}],"edges":[]}"#;
        let d: NetworkDescription = serde_json::from_str(json).unwrap();
        assert!(d.build().is_err(), "ring kind always has p = 2");
    }

    #[test]
    fn unknown_edge_ids_and_duplicates_are_rejected() {
        let mut d = NetworkDescription::ring(3);
        d.edges.push([0, 7]);
        assert!(d.build().is_err());
        let mut d = NetworkDescription::ring(3);
        d.subsystems[2].id = 0;
        assert!(d.build().is_err());
    }

    #[test]
    fn declared_dimensions_must_match_matrices() {
        let mut d = NetworkDescription::two_subsystem();
        d.subsystems[0].n = 3;
        assert!(d.build().is_err());
    }
}
