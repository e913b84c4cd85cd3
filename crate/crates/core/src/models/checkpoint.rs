//! Text checkpoints. Layout:
//!
//! ```text
//! attendout-checkpoint 1
//! kind task
//! config {"vocab_size":...}
//! tensor tok_emb 8 16
//! <one line per row, values in shortest round-trip exponent form>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{GeneratorConfig, GeneratorParams, ParamSet, TaskConfig, TaskModelParams};
use crate::error::{Error, Result};

const MAGIC: &str = "attendout-checkpoint 1";

fn render<P: ParamSet, C: Serialize>(kind: &str, config: &C, params: &P) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "kind {kind}");
    let _ = writeln!(out, "config {}", serde_json::to_string(config)?);
    for (name, t) in params.named_tensors() {
        let _ = writeln!(out, "tensor {name} {} {}", t.rows(), t.cols());
        for r in 0..t.rows() {
            let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let _ = writeln!(out, "end");
    Ok(out)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: "unexpected end of checkpoint".into(),
            })
    }
}

fn parse<P: ParamSet, C: DeserializeOwned>(
    text: &str,
    kind: &str,
    build: impl FnOnce(&C) -> Result<P>,
) -> Result<P> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, magic) = lines.next()?;
    if magic != MAGIC {
        return Err(Error::Parse {
            line: n,
            msg: format!("expected `{MAGIC}`"),
        });
    }
    let (n, kind_line) = lines.next()?;
    if kind_line != format!("kind {kind}") {
        return Err(Error::Parse {
            line: n,
            msg: format!("expected `kind {kind}`, found `{kind_line}`"),
        });
    }
    let (n, cfg_line) = lines.next()?;
    let cfg_json = cfg_line.strip_prefix("config ").ok_or(Error::Parse {
        line: n,
        msg: "expected config line".into(),
    })?;
    let config: C = serde_json::from_str(cfg_json).map_err(|e| Error::Parse {
        line: n,
        msg: e.to_string(),
    })?;
    let mut params = build(&config)?;
    let expected: Vec<(String, usize, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.rows(), t.cols()))
        .collect();
    let mut values: Vec<f64> = Vec::with_capacity(params.num_params());
    for (name, rows, cols) in &expected {
        let (n, header) = lines.next()?;
        let want = format!("tensor {name} {rows} {cols}");
        if header != want {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected `{want}`, found `{header}`"),
            });
        }
        for _ in 0..*rows {
            let (n, row) = lines.next()?;
            let parsed: Vec<f64> = row
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: n,
                    msg: e.to_string(),
                })?;
            if parsed.len() != *cols {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("{} values, expected {cols}", parsed.len()),
                });
            }
            values.extend(parsed);
        }
    }
    let (n, end) = lines.next()?;
    if end != "end" {
        return Err(Error::Parse {
            line: n,
            msg: "expected `end`".into(),
        });
    }
    params.assign_flat(&values)?;
    Ok(params)
}

pub fn save_task_model(params: &TaskModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, render("task", &params.config, params)?)?;
    Ok(())
}

pub fn load_task_model(path: &Path) -> Result<TaskModelParams> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, "task", |c: &TaskConfig| TaskModelParams::init(c, 0))
}

pub fn save_generator(params: &GeneratorParams, path: &Path) -> Result<()> {
    std::fs::write(path, render("generator", &params.config, params)?)?;
    Ok(())
}

pub fn load_generator(path: &Path) -> Result<GeneratorParams> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, "generator", |c: &GeneratorConfig| {
        GeneratorParams::init(c, 0)
    })
}
