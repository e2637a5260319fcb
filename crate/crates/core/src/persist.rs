//! Versioned plain-text policy files.
//!
//! ```text
//! prbgnn-policy v1
//! kind gnn-reinforce
//! episode 1500
//! config {...}
//! matrix w1 4 16
//! <one line of values per row>
//! ...
//! ```
//!
//! Fixed agents store `param <name> <value>` lines instead of matrices.

use std::fmt::Write as _;
use std::path::Path;

use crate::agent::{AgentKind, Policy};
use crate::env::{EnvConfig, OBS_DIM};
use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::graph::GcnParams;
use crate::nncore::Matrix;

pub const MAGIC: &str = "prbgnn-policy v1";
const TENSORS: [&str; 6] = ["w1", "b1", "w2", "b2", "w_head", "b_head"];

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub policy: Policy,
    /// Number of updates the policy had received.
    pub episode: usize,
    /// JSON echo of the run config that produced the policy.
    pub config: String,
}

fn write_matrix(s: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let _ = writeln!(s, "matrix {name} {rows} {cols}");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
}

pub fn encode(file: &PolicyFile) -> String {
    let mut s = format!("{MAGIC}\nkind {}\nepisode {}\n", file.policy.kind(), file.episode);
    let _ = writeln!(s, "config {}", file.config.replace('\n', " "));
    match &file.policy {
        Policy::Gnn(p) | Policy::Mlp(p) => {
            let (f, h, k) = (p.feature_dim(), p.hidden_dim(), p.num_actions());
            write_matrix(&mut s, "w1", f, h, p.w1.as_slice());
            write_matrix(&mut s, "b1", 1, h, &p.b1);
            write_matrix(&mut s, "w2", h, h, p.w2.as_slice());
            write_matrix(&mut s, "b2", 1, h, &p.b2);
            write_matrix(&mut s, "w_head", h, k, p.w_head.as_slice());
            write_matrix(&mut s, "b_head", 1, k, &p.b_head);
        }
        Policy::Random { actions } => {
            let _ = writeln!(s, "param actions {actions}");
        }
        Policy::Static { action, actions } => {
            let _ = writeln!(s, "param action {action}\nparam actions {actions}");
        }
        Policy::Oracle { chunk_size, actions } => {
            let _ = writeln!(s, "param chunk_size {chunk_size}\nparam actions {actions}");
        }
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::PolicyFile {
            path: self.path.to_path_buf(),
            msg: format!("line {}: {msg}", self.last),
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some(l)
    }

    fn expect(&mut self, what: &str) -> Result<&'a str> {
        match self.next() {
            Some(l) => Ok(l),
            None => Err(self.err(format!("unexpected end of file, expected {what}"))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.expect(key)?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`")))
    }

    fn number<T: std::str::FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("bad number `{tok}`")))
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let header = self.keyed("matrix")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(self.err(format!("expected `matrix {name} <rows> <cols>`")));
        }
        let rows: usize = self.number(parts[1])?;
        let cols: usize = self.number(parts[2])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.expect("matrix row")?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = self.number(tok)?;
                if !v.is_finite() {
                    return Err(self.err("non-finite value"));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.err(format!("row has {} values, expected {cols}", data.len() - before)));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    fn param(&mut self, name: &str) -> Result<u64> {
        let rest = self.keyed("param")?;
        match rest.split_once(' ') {
            Some((n, v)) if n == name => self.number(v.trim()),
            _ => Err(self.err(format!("expected `param {name} <value>`"))),
        }
    }
}

pub fn decode(text: &str, path: &Path) -> Result<PolicyFile> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        path,
        last: 0,
    };
    if lines.expect("header")? != MAGIC {
        return Err(lines.err(format!("not a policy file (expected `{MAGIC}`)")));
    }
    let kind_str = lines.keyed("kind")?;
    let kind: AgentKind = kind_str.parse().map_err(|_| lines.err(format!("unknown agent kind `{kind_str}`")))?;
    let episode: usize = {
        let e = lines.keyed("episode")?;
        lines.number(e)?
    };
    let config = lines.keyed("config")?.to_string();
    let policy = match kind {
        AgentKind::GnnReinforce | AgentKind::MlpReinforce => {
            let mut m: Vec<Matrix> = Vec::with_capacity(6);
            for name in TENSORS {
                m.push(lines.matrix(name)?);
            }
            let vec_of = |m: &Matrix| m.as_slice().to_vec();
            for i in [1, 3, 5] {
                if m[i].rows() != 1 {
                    return Err(lines.err(format!("{} must be a single row", TENSORS[i])));
                }
            }
            let p = GcnParams {
                b1: vec_of(&m[1]),
                b2: vec_of(&m[3]),
                b_head: vec_of(&m[5]),
                w1: m[0].clone(),
                w2: m[2].clone(),
                w_head: m[4].clone(),
            };
            p.validate().map_err(|e| lines.err(e))?;
            if kind == AgentKind::GnnReinforce {
                Policy::Gnn(p)
            } else {
                Policy::Mlp(p)
            }
        }
        AgentKind::Random => Policy::Random {
            actions: lines.param("actions")? as usize,
        },
        AgentKind::Static => Policy::Static {
            action: lines.param("action")? as usize,
            actions: lines.param("actions")? as usize,
        },
        AgentKind::Oracle => Policy::Oracle {
            chunk_size: lines.param("chunk_size")? as u32,
            actions: lines.param("actions")? as usize,
        },
    };
    if let Some(extra) = lines.next().filter(|l| !l.trim().is_empty()) {
        return Err(lines.err(format!("trailing content `{extra}`")));
    }
    Ok(PolicyFile { policy, episode, config })
}

/// Rejects a policy whose action or feature count differs from what `env` produces.
pub fn check_dims(policy: &Policy, env: &EnvConfig) -> Result<()> {
    if policy.num_actions() != env.num_chunks {
        return Err(Error::Config(format!(
            "policy has {} actions but env.num_chunks is {}",
            policy.num_actions(),
            env.num_chunks
        )));
    }
    if let Some(p) = policy.params() {
        if p.feature_dim() != OBS_DIM {
            return Err(Error::Config(format!(
                "policy expects {} node features but observations have {OBS_DIM}",
                p.feature_dim()
            )));
        }
    }
    if let Policy::Static { action, actions } = policy {
        if action >= actions {
            return Err(Error::Config(format!("static action {action} out of range for {actions} actions")));
        }
    }
    Ok(())
}

pub fn save(path: &Path, file: &PolicyFile) -> Result<()> {
    write_atomic(path, encode(file).as_bytes())
}

pub fn load(path: &Path) -> Result<PolicyFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::PolicyFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode(&text, path)
}

/// Loads and checks the policy against the env it will run in.
pub fn load_for(path: &Path, env: &EnvConfig) -> Result<PolicyFile> {
    let f = load(path)?;
    check_dims(&f.policy, env)?;
    Ok(f)
}
