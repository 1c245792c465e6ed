//! Layered settings: built-in defaults, then a config file, then flags.

use std::path::Path;

use dmem::kv::KeyValues;

use crate::CliError;

/// Every key any command understands; config files may only use these.
const KNOWN_KEYS: &[&str] = &[
    // synth
    "count",
    "size",
    "nuclei_min",
    "nuclei_max",
    "normal_radius_min",
    "normal_radius_max",
    "abnormal_radius_min",
    "abnormal_radius_max",
    "abnormal_fraction",
    "noise",
    "channels",
    // shared
    "seed",
    "out",
    // architecture
    "variant",
    "stages",
    "in_channels",
    "initial_channels",
    "growth_rate",
    "layers_per_block",
    "num_classes",
    "input_height",
    "input_width",
    // training
    "data",
    "val",
    "holdout",
    "mask_format",
    "size_threshold",
    "precision",
    "parallel",
    "single_path",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "momentum",
    "class_weights",
    "flips",
    // predict
    "bundle",
    "images",
    "resize",
    // eval
    "gt",
];

/// Read a config file, rejecting keys no command knows.
pub fn load_file(path: &Path) -> Result<KeyValues, CliError> {
    let kv = KeyValues::load(path)?;
    let unknown: Vec<&str> = kv.keys().filter(|k| !KNOWN_KEYS.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(CliError::usage(format!(
            "{}: unknown keys {}",
            path.display(),
            unknown.join(", ")
        )));
    }
    Ok(kv)
}

/// `defaults`, overridden by the file's keys that `defaults` also has,
/// overridden by `flags`.
pub fn layer(defaults: KeyValues, file: Option<&KeyValues>, flags: &KeyValues) -> KeyValues {
    let mut out = defaults;
    if let Some(file) = file {
        for (k, v) in file.iter() {
            if out.get(k).is_some() {
                out.set(k, v);
            }
        }
    }
    out.merge(flags);
    out
}

/// Print the effective settings to stderr.
pub fn echo(command: &str, kv: &KeyValues) {
    eprintln!("# effective {command} config");
    eprint!("{}", kv.render());
}

/// Parse a required key, as a usage error when malformed.
pub fn get<V: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<V, CliError>
where
    V::Err: std::fmt::Display,
{
    kv.require(key).map_err(CliError::usage)
}

/// Non-empty string value of `key`, or a usage error naming the flag.
pub fn path(kv: &KeyValues, key: &str, flag: &str) -> Result<std::path::PathBuf, CliError> {
    match kv.get(key) {
        Some(v) if !v.is_empty() => Ok(v.into()),
        _ => Err(CliError::usage(format!("missing {flag} (or `{key}` in the config file)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let mut d = KeyValues::new();
        d.set("epochs", 5);
        d.set("lr", 0.1);
        d.set("seed", 1);
        let mut file = KeyValues::new();
        file.set("epochs", 7);
        file.set("lr", 0.2);
        file.set("count", 99);
        let mut flags = KeyValues::new();
        flags.set("lr", 0.3);
        let out = layer(d, Some(&file), &flags);
        assert_eq!(out.get("epochs"), Some("7"));
        assert_eq!(out.get("lr"), Some("0.3"));
        assert_eq!(out.get("seed"), Some("1"));
        assert_eq!(out.get("count"), None);
    }
}
