//! Leave-one-out protocol assembly.

use crate::error::{Error, Result};

use super::config::DomainSpec;

/// Test on `target`, train on every other domain.
pub fn leave_one_out(domains: &[DomainSpec], target: &str) -> Result<(Vec<DomainSpec>, DomainSpec)> {
    if domains.len() < 2 {
        return Err(Error::Config(format!("leave-one-out needs at least 2 domains, got {}", domains.len())));
    }
    let test = domains
        .iter()
        .find(|d| d.name == target)
        .cloned()
        .ok_or_else(|| Error::Config(format!("target domain {target:?} not found")))?;
    let train = domains.iter().filter(|d| d.name != target).cloned().collect();
    Ok((train, test))
}

/// Scenario label such as `a+b+c->d`.
pub fn scenario_name(train: &[DomainSpec], test: &DomainSpec) -> String {
    let src: Vec<&str> = train.iter().map(|d| d.name.as_str()).collect();
    format!("{}->{}", src.join("+"), test.name)
}
