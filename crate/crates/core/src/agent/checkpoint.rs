//! Plain-text parameter snapshots.
//!
//! ```text
//! covmol-checkpoint v1
//! config {"elements":["X"],...}
//! param embed.0.mix.l0 4,2,2 0.1 -0.3 ...
//! ```
//!
//! Values use the shortest round-trip decimal form, so a save/load cycle is
//! bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Agent, AgentConfig};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

const HEADER: &str = "covmol-checkpoint v1";

impl Agent {
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let _ = writeln!(out, "config {config}");
        for p in self.params.iter() {
            let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let _ = write!(out, "param {} {}", p.name, shape.join(","));
            for v in &p.data {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str, source: &str) -> Result<Agent> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(Error::parse(source, 1, format!("expected `{HEADER}`"))),
        }
        let config: AgentConfig = match lines.next() {
            Some((i, l)) => {
                let json = l
                    .strip_prefix("config ")
                    .ok_or_else(|| Error::parse(source, i + 1, "expected a config line"))?;
                serde_json::from_str(json).map_err(|e| Error::parse(source, i + 1, e.to_string()))?
            }
            None => return Err(Error::parse(source, 2, "missing config line")),
        };
        let mut store = ParamStore::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(source, i + 1, m);
            let mut fields = line.split_ascii_whitespace();
            if fields.next() != Some("param") {
                return Err(err("expected a param line".into()));
            }
            let name = fields.next().ok_or_else(|| err("missing name".into()))?;
            let shape = fields
                .next()
                .ok_or_else(|| err("missing shape".into()))?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|e| err(format!("shape: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let data = fields
                .map(|s| s.parse::<f64>().map_err(|e| err(format!("value `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(err(format!("{} values for shape {:?}", data.len(), shape)));
            }
            store.add(name, shape, data);
        }
        let mut agent = Agent::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        agent.params.assign(&store)?;
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Agent> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Agent::from_checkpoint(&text, &path.display().to_string())
    }
}
