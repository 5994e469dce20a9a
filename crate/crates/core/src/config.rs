//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const TRAIN_KEYS: [&str; 13] = [
    "lr",
    "lambda",
    "momentum",
    "decay_mode",
    "variant",
    "pwe",
    "twt",
    "batch_size",
    "max_epochs",
    "seed",
    "val_size",
    "search_resolution",
    "search_max_iterations",
];

/// Parses `key = value` lines in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one field by its config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "decay_mode" => self.decay_mode = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "pwe" => self.pwe = parse(key, value)?,
            "twt" => self.twt = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "val_size" => self.val_size = parse(key, value)?,
            "search_resolution" => self.search.relative_resolution = parse(key, value)?,
            "search_max_iterations" => self.search.max_iterations = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by every recognised key in `text`; unknown keys
    /// are errors.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialises every field; floats use the shortest exact representation
    /// so the text parses back to an identical config.
    pub fn to_kv_text(&self) -> String {
        let values = [
            self.lr.to_string(),
            self.lambda.to_string(),
            self.momentum.to_string(),
            self.decay_mode.to_string(),
            self.variant.to_string(),
            self.pwe.to_string(),
            self.twt.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.seed.to_string(),
            self.val_size.to_string(),
            self.search.relative_resolution.to_string(),
            self.search.max_iterations.to_string(),
        ];
        TRAIN_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reg::Variant;

    #[test]
    fn round_trip() {
        let cfg = TrainConfig {
            lambda: 1.0 / 3.0 * 1e-4,
            variant: Variant::L2,
            seed: 17,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = TrainConfig::from_kv_text("# run\n\n  pwe=5\ntwt =0.1 \n").unwrap();
        assert_eq!(cfg.pwe, 5);
        assert_eq!(cfg.twt, 0.1);
        assert_eq!(cfg.lr, 0.1);
    }

    #[test]
    fn malformed_inputs() {
        for bad in ["pwe", "pwe = x", "nope = 1", "pwe = 1\npwe = 2", "= 3", "pwe = 0", "variant = l3"] {
            assert!(TrainConfig::from_kv_text(bad).is_err(), "{bad}");
        }
    }
}
