//! Minimal argument parsing: `--flag value` options plus bare `key=value`
//! config overrides.

use crate::errors::CliError;
use fskd_core::config::RunConfig;

#[derive(Debug, Default)]
pub struct Parsed {
    pub flags: Vec<(String, String)>,
    pub overrides: Vec<(String, String)>,
}

pub fn parse(args: &[String], known_flags: &[&str]) -> Result<Parsed, CliError> {
    let mut parsed = Parsed::default();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(name) = arg.strip_prefix("--") {
            if !known_flags.contains(&name) {
                return Err(CliError::usage(format!("unknown option `--{name}`")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::usage(format!("`--{name}` needs a value")))?;
            parsed.flags.push((name.to_string(), value.clone()));
            i += 2;
        } else if let Some((k, v)) = arg.split_once('=') {
            parsed.overrides.push((k.trim().to_string(), v.trim().to_string()));
            i += 1;
        } else {
            return Err(CliError::usage(format!("unexpected argument `{arg}`")));
        }
    }
    Ok(parsed)
}

impl Parsed {
    pub fn flag(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, name: &str) -> Result<&str, CliError> {
        self.flag(name)
            .ok_or_else(|| CliError::usage(format!("missing required option `--{name}`")))
    }
}

/// Resolved configuration: file (when given) plus overrides on top.
pub fn load_config(parsed: &Parsed) -> Result<RunConfig, CliError> {
    let mut config = match parsed.flag("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::new("config.read", format!("{path}: {e}"))
            })?;
            RunConfig::parse_str(&text)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &parsed.overrides {
        config.apply_override(k, v)?;
    }
    Ok(config)
}
