//! Minimal flag parser: `--name value` pairs plus boolean `--name` switches.

use std::collections::BTreeMap;

pub struct Args {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

pub struct UsageError(pub String);

impl Args {
    pub fn parse(raw: &[String], switch_names: &[&str]) -> Result<Args, UsageError> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut it = raw.iter().peekable();
        while let Some(tok) = it.next() {
            let name = tok
                .strip_prefix("--")
                .ok_or_else(|| UsageError(format!("unexpected argument {tok:?}")))?;
            if switch_names.contains(&name) {
                switches.push(name.to_string());
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| UsageError(format!("--{name} needs a value")))?;
            if values.insert(name.to_string(), value.clone()).is_some() {
                return Err(UsageError(format!("--{name} given twice")));
            }
        }
        Ok(Args {
            values,
            switches,
            consumed: std::cell::RefCell::new(Vec::new()),
        })
    }

    pub fn required(&self, name: &str) -> Result<&str, UsageError> {
        self.consumed.borrow_mut().push(name.to_string());
        self.values
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| UsageError(format!("missing required flag --{name}")))
    }

    pub fn optional(&self, name: &str) -> Option<&str> {
        self.consumed.borrow_mut().push(name.to_string());
        self.values.get(name).map(|s| s.as_str())
    }

    pub fn switch(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    pub fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, UsageError> {
        match self.optional(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| UsageError(format!("--{name}: cannot parse {v:?}"))),
        }
    }

    pub fn required_num<T: std::str::FromStr>(&self, name: &str) -> Result<T, UsageError> {
        let v = self.required(name)?;
        v.parse()
            .map_err(|_| UsageError(format!("--{name}: cannot parse {v:?}")))
    }

    /// Comma-separated list of numbers.
    pub fn num_list<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>, UsageError> {
        let v = self.required(name)?;
        v.split(',')
            .map(|tok| {
                tok.trim()
                    .parse()
                    .map_err(|_| UsageError(format!("--{name}: cannot parse {tok:?}")))
            })
            .collect()
    }

    /// Reject flags that no code path consumed.
    pub fn finish(&self) -> Result<(), UsageError> {
        let consumed = self.consumed.borrow();
        for key in self.values.keys() {
            if !consumed.contains(key) {
                return Err(UsageError(format!("unknown flag --{key}")));
            }
        }
        Ok(())
    }
}
