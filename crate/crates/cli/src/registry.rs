//! Density-profile registry: `linear(a, b)`, `exponential(a, b)`,
//! `tanh(a, b, c, w)` and `tabulated(path)`.
//!
//! A tabulated file holds one `z rho` pair per line (whitespace or comma
//! separated); blank lines and `#` comments are skipped. Heights must be
//! strictly increasing.

use std::path::Path;

use rtspectra::DensityProfile;

use crate::CliError;

fn bad(spec: &str, reason: impl Into<String>) -> CliError {
    CliError::Profile {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

/// Resolves a profile spec; relative table paths are taken from `base`.
pub fn profile_from_spec(spec: &str, base: &Path) -> Result<DensityProfile, CliError> {
    let s = spec.trim();
    let open = s.find('(').ok_or_else(|| bad(spec, "expected name(args)"))?;
    if !s.ends_with(')') {
        return Err(bad(spec, "missing closing parenthesis"));
    }
    let name = s[..open].trim();
    let inner = &s[open + 1..s.len() - 1];
    if name == "tabulated" {
        let path = base.join(inner.trim().trim_matches('"'));
        return read_table(&path);
    }
    let args: Vec<f64> = inner
        .split(',')
        .map(|a| a.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(spec, format!("arguments: {e}")))?;
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(bad(spec, format!("{name} takes {n} arguments, got {}", args.len())))
        }
    };
    let p = match name {
        "linear" => {
            arity(2)?;
            DensityProfile::linear(args[0], args[1])
        }
        "exponential" => {
            arity(2)?;
            DensityProfile::exponential(args[0], args[1])
        }
        "tanh" => {
            arity(4)?;
            DensityProfile::tanh(args[0], args[1], args[2], args[3])
                .map_err(|e| bad(spec, e.to_string()))?
        }
        other => {
            return Err(bad(
                spec,
                format!("unknown profile `{other}` (linear, exponential, tanh, tabulated)"),
            ))
        }
    };
    Ok(p)
}

/// Parses a tabulated profile; errors carry the byte offset of the
/// offending token.
pub fn parse_table(source: &str, bytes: &[u8]) -> Result<DensityProfile, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::Table {
        path: source.to_string(),
        offset: e.valid_up_to(),
        reason: "invalid UTF-8".into(),
    })?;
    let (mut z, mut rho) = (Vec::new(), Vec::new());
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap_or("");
        let mut fields = Vec::new();
        let mut pos = 0;
        for tok in content.split(|c: char| c.is_whitespace() || c == ',') {
            if !tok.is_empty() {
                let off = line_start + pos;
                let v: f64 = tok.parse().map_err(|_| CliError::Table {
                    path: source.to_string(),
                    offset: off,
                    reason: format!("`{tok}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(CliError::Table {
                        path: source.to_string(),
                        offset: off,
                        reason: format!("`{tok}` is not finite"),
                    });
                }
                fields.push((v, off));
            }
            pos += tok.len() + 1;
        }
        match fields.len() {
            0 => {}
            2 => {
                if let Some(&last) = z.last() {
                    if !(fields[0].0 > last) {
                        return Err(CliError::Table {
                            path: source.to_string(),
                            offset: fields[0].1,
                            reason: format!("height {} does not increase", fields[0].0),
                        });
                    }
                }
                z.push(fields[0].0);
                rho.push(fields[1].0);
            }
            n => {
                return Err(CliError::Table {
                    path: source.to_string(),
                    offset: line_start,
                    reason: format!("expected 2 columns, found {n}"),
                })
            }
        }
        line_start += line.len();
    }
    DensityProfile::tabulated(source, z, rho).map_err(|e| CliError::Table {
        path: source.to_string(),
        offset: bytes.len(),
        reason: e.to_string(),
    })
}

fn read_table(path: &Path) -> Result<DensityProfile, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_table(&path.display().to_string(), &bytes)
}
