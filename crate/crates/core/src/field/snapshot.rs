//! Design snapshot files: a small self-describing text format holding the
//! architecture, the frozen frequency matrix, the normalization box, and the
//! flat weight vector. Numbers are written in Rust's shortest round-trip
//! notation, so save followed by load reproduces the network bitwise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;

use super::{DesignNetwork, Layout, NetworkSpec};

const MAGIC: &str = "swelltopo design snapshot v1";

fn parse_err(detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "design snapshot".into(),
        detail: detail.into(),
    }
}

impl DesignNetwork {
    /// Serializes the full network state.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("seed {}\n", self.spec.seed));
        out.push_str(&format!("bandwidth {}\n", self.spec.bandwidth));
        out.push_str(&format!("num_fourier {}\n", self.spec.num_fourier));
        out.push_str(&format!("hidden {}\n", self.spec.hidden));
        out.push_str(&format!("n_phases {}\n", self.spec.n_phases));
        out.push_str(&format!(
            "theta_head {}\n",
            if self.spec.theta_head { 1 } else { 0 }
        ));
        out.push_str(&format!(
            "domain {} {} {} {}\n",
            self.domain[0][0], self.domain[0][1], self.domain[1][0], self.domain[1][1]
        ));
        out.push_str(&format!("frequencies {}\n", self.b_freq.len()));
        for b in &self.b_freq {
            out.push_str(&format!("{} {}\n", b[0], b[1]));
        }
        out.push_str(&format!("params {}\n", self.params.len()));
        for p in &self.params {
            out.push_str(&format!("{p}\n"));
        }
        atomic_write(path, &out)
    }

    /// Restores a network saved by [`DesignNetwork::save_snapshot`].
    pub fn load_snapshot(path: &Path) -> Result<DesignNetwork> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(parse_err("missing or wrong header line"));
        }

        fn field<'a>(
            lines: &mut std::str::Lines<'a>,
            key: &str,
        ) -> Result<std::str::SplitWhitespace<'a>> {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(format!("unexpected end of file before '{key}'")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(parse_err(format!("expected '{key}' line, got '{line}'")));
            }
            Ok(parts)
        }
        fn one<T: std::str::FromStr>(
            lines: &mut std::str::Lines<'_>,
            key: &str,
        ) -> Result<T> {
            field(lines, key)?
                .next()
                .ok_or_else(|| parse_err(format!("'{key}' line has no value")))?
                .parse::<T>()
                .map_err(|_| parse_err(format!("bad value on '{key}' line")))
        }

        let seed: u64 = one(&mut lines, "seed")?;
        let bandwidth: f64 = one(&mut lines, "bandwidth")?;
        let num_fourier: usize = one(&mut lines, "num_fourier")?;
        let hidden: usize = one(&mut lines, "hidden")?;
        let n_phases: usize = one(&mut lines, "n_phases")?;
        let theta_head = one::<u8>(&mut lines, "theta_head")? != 0;

        let mut dom = field(&mut lines, "domain")?;
        let mut next_f64 = |what: &str| -> Result<f64> {
            dom.next()
                .ok_or_else(|| parse_err(format!("domain line too short at {what}")))?
                .parse::<f64>()
                .map_err(|_| parse_err(format!("bad domain value {what}")))
        };
        let domain = [
            [next_f64("x0")?, next_f64("y0")?],
            [next_f64("x1")?, next_f64("y1")?],
        ];

        let n_freq: usize = one(&mut lines, "frequencies")?;
        if n_freq != num_fourier {
            return Err(parse_err(format!(
                "frequency count {n_freq} disagrees with num_fourier {num_fourier}"
            )));
        }
        let mut b_freq = Vec::with_capacity(n_freq);
        for i in 0..n_freq {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(format!("missing frequency row {i}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(format!("bad frequency row {i}: '{line}'")))?;
            if vals.len() != 2 {
                return Err(parse_err(format!("frequency row {i} needs 2 entries")));
            }
            b_freq.push([vals[0], vals[1]]);
        }

        let n_params: usize = one(&mut lines, "params")?;
        let mut params = Vec::with_capacity(n_params);
        for i in 0..n_params {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(format!("missing parameter {i}")))?;
            params.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("bad parameter {i}: '{line}'")))?,
            );
        }

        let spec = NetworkSpec {
            seed,
            num_fourier,
            hidden,
            n_phases,
            theta_head,
            bandwidth,
        };
        let layout = Layout::new(&spec);
        if layout.total != params.len() {
            return Err(parse_err(format!(
                "architecture implies {} parameters but file holds {}",
                layout.total,
                params.len()
            )));
        }
        if !(domain[1][0] > domain[0][0] && domain[1][1] > domain[0][1]) {
            return Err(parse_err(format!("degenerate domain box {domain:?}")));
        }
        Ok(DesignNetwork {
            spec,
            b_freq,
            params,
            domain,
            layout,
        })
    }
}
