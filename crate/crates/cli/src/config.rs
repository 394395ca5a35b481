//! Flat `key=value` run configuration.
//!
//! Keys are long flag names without the dashes. A config file is spliced
//! into the argument list right after the subcommand, ahead of everything
//! typed on the command line, so explicit flags win.

use std::collections::BTreeMap;
use std::path::Path;

use clap::{ArgAction, Command};
use serde::Serialize;

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

/// Ordered `key=value` pairs; `#` starts a comment line.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Path given with `--config`, if any.
pub fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

/// Rewrites `argv` so the file's settings precede the command-line ones.
pub fn splice(cmd: &Command, argv: &[String], file: &[(String, String)]) -> Result<Vec<String>, String> {
    let mut cmd = cmd.clone();
    cmd.build();
    let sub_at = argv
        .iter()
        .skip(1)
        .position(|a| cmd.find_subcommand(a).is_some())
        .map(|i| i + 1)
        .ok_or("no subcommand given")?;
    let sub_name = argv[sub_at].clone();
    let sub = cmd.find_subcommand(&sub_name).expect("located above");

    let mut injected = Vec::new();
    for (key, value) in file {
        if key == "command" {
            if *value != sub_name {
                return Err(format!("config is for `{value}`, not `{sub_name}`"));
            }
            continue;
        }
        if key == "config" {
            return Err("a config file cannot name another config file".into());
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("unknown config key `{key}` for `{sub_name}`"))?;
        let takes_value = matches!(arg.get_action(), ArgAction::Set | ArgAction::Append);
        if takes_value {
            injected.push(format!("--{key}"));
            injected.push(value.clone());
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                other => return Err(format!("config key `{key}` expects true or false, got {other:?}")),
            }
        }
    }

    let mut out = vec![argv[0].clone(), sub_name];
    out.extend(injected);
    out.extend(argv[1..sub_at].iter().cloned());
    out.extend(argv[sub_at + 1..].iter().cloned());
    Ok(out)
}

/// `command=...` then one line per set value of `args` and `globals`, in
/// a form [`splice`] reads back.
pub fn render(command: &str, globals: &impl Serialize, args: &impl Serialize) -> String {
    let mut lines = vec![format!("command={command}")];
    for v in [serde_json::to_value(globals), serde_json::to_value(args)] {
        let Ok(serde_json::Value::Object(map)) = v else {
            continue;
        };
        let sorted: BTreeMap<_, _> = map.into_iter().collect();
        for (k, v) in sorted {
            let key = k.replace('_', "-");
            let text = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::Bool(false) => continue,
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            lines.push(format!("{key}={text}"));
        }
    }
    lines.join("\n") + "\n"
}

pub fn write(dir: &Path, text: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_CONFIG_FILE), text)
}
