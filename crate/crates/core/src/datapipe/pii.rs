use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiiRule {
    pub name: String,
    pub pattern: String,
    pub placeholder: String,
}

impl PiiRule {
    pub fn new(name: &str, pattern: &str, placeholder: &str) -> Self {
        Self { name: name.into(), pattern: pattern.into(), placeholder: placeholder.into() }
    }
}

/// Ordered rules; earlier rules redact first.
#[derive(Debug, Clone)]
pub struct PiiRuleset {
    rules: Vec<(PiiRule, Regex)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redaction {
    pub text: String,
    pub counts: BTreeMap<String, usize>,
}

impl Redaction {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

impl PiiRuleset {
    pub fn new(rules: Vec<PiiRule>) -> Result<Self> {
        let rules = rules
            .into_iter()
            .map(|r| {
                let re = Regex::new(&r.pattern).map_err(|source| Error::Pattern { name: r.name.clone(), source })?;
                if re.is_match(&r.placeholder) {
                    return Err(Error::invalid(format!("placeholder of rule {:?} matches its own pattern", r.name)));
                }
                Ok((r, re))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rules })
    }

    pub fn default_rule_specs() -> Vec<PiiRule> {
        vec![
            PiiRule::new("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}", "[EMAIL]"),
            PiiRule::new("phone", r"\+[0-9]{1,3}([ .-]?\(?[0-9]{2,4}\)?){2,5}", "[PHONE]"),
            PiiRule::new("id", r"[0-9]{17}[0-9Xx]|[0-9]{15,16}|[0-9]{3}-[0-9]{2}-[0-9]{4}", "[ID]"),
        ]
    }

    pub fn default_rules() -> Self {
        Self::new(Self::default_rule_specs()).expect("built-in patterns compile")
    }

    pub fn rules(&self) -> impl Iterator<Item = &PiiRule> {
        self.rules.iter().map(|(r, _)| r)
    }

    pub fn redact(&self, text: &str) -> Redaction {
        let mut text = text.to_string();
        let mut counts = BTreeMap::new();
        for (rule, re) in &self.rules {
            let n = re.find_iter(&text).count();
            if n > 0 {
                text = re.replace_all(&text, regex::NoExpand(&rule.placeholder)).into_owned();
            }
            counts.insert(rule.name.clone(), n);
        }
        Redaction { text, counts }
    }
}
