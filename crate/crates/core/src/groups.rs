//! Variable grouping and normalization statistics.
//!
//! Groups partition the variable set: masking operates on whole groups so
//! that mutually predictive variables disappear together.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VariableDef {
    pub name: String,
    pub is_dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDef {
    pub name: String,
    /// Indices into the owning spec's variable table.
    pub members: Vec<usize>,
}

/// A partition of all model variables (dynamic forcings and static
/// attributes) into named groups. Every variable belongs to exactly one
/// group.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableGroupSpec {
    variables: Vec<VariableDef>,
    groups: Vec<GroupDef>,
}

impl VariableGroupSpec {
    /// Build from (group name, [(variable name, is_dynamic)]) lists.
    pub fn new(groups: &[(&str, &[(&str, bool)])]) -> Result<Self> {
        let mut variables = Vec::new();
        let mut out_groups = Vec::new();
        for (gname, members) in groups {
            let mut idxs = Vec::new();
            for (vname, is_dynamic) in members.iter() {
                if variables.iter().any(|v: &VariableDef| v.name == *vname) {
                    return Err(Error::Invalid(alloc::format!(
                        "variable '{vname}' appears in more than one group"
                    )));
                }
                variables.push(VariableDef {
                    name: vname.to_string(),
                    is_dynamic: *is_dynamic,
                });
                idxs.push(variables.len() - 1);
            }
            if idxs.is_empty() {
                return Err(Error::Invalid(alloc::format!("group '{gname}' is empty")));
            }
            out_groups.push(GroupDef {
                name: gname.to_string(),
                members: idxs,
            });
        }
        if variables.is_empty() {
            return Err(Error::Invalid("group spec has no variables".into()));
        }
        Ok(VariableGroupSpec {
            variables,
            groups: out_groups,
        })
    }

    /// Parse the plain-text format: one `group_name: var1, var2, ...` line
    /// per group. Variable names ending in `*` are dynamic forcings; the
    /// marker is stripped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups: Vec<(String, Vec<(String, bool)>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| {
                Error::Invalid(alloc::format!(
                    "group spec line {}: expected 'name: vars'",
                    lineno + 1
                ))
            })?;
            let mut members = Vec::new();
            for tok in rest.split(',') {
                let tok = tok.trim();
                if tok.is_empty() {
                    continue;
                }
                match tok.strip_suffix('*') {
                    Some(dynamic) => members.push((dynamic.trim().to_string(), true)),
                    None => members.push((tok.to_string(), false)),
                }
            }
            groups.push((name.trim().to_string(), members));
        }
        let borrowed: Vec<(&str, Vec<(&str, bool)>)> = groups
            .iter()
            .map(|(n, ms)| {
                (
                    n.as_str(),
                    ms.iter().map(|(v, d)| (v.as_str(), *d)).collect(),
                )
            })
            .collect();
        let as_slices: Vec<(&str, &[(&str, bool)])> = borrowed
            .iter()
            .map(|(n, ms)| (*n, ms.as_slice()))
            .collect();
        Self::new(&as_slices)
    }

    /// Serialize back to the plain-text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&g.name);
            out.push_str(": ");
            let names: Vec<String> = g
                .members
                .iter()
                .map(|&i| {
                    let v = &self.variables[i];
                    if v.is_dynamic {
                        alloc::format!("{}*", v.name)
                    } else {
                        v.name.clone()
                    }
                })
                .collect();
            out.push_str(&names.join(", "));
            out.push('\n');
        }
        out
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn variables(&self) -> &[VariableDef] {
        &self.variables
    }

    pub fn groups(&self) -> &[GroupDef] {
        &self.groups
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Group index owning a variable.
    pub fn group_of(&self, var_index: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.members.contains(&var_index))
            .expect("partition invariant")
    }

    /// Dynamic variable names in spec order.
    pub fn dynamic_names(&self) -> Vec<&str> {
        self.variables
            .iter()
            .filter(|v| v.is_dynamic)
            .map(|v| v.name.as_str())
            .collect()
    }

    /// Static variable names in spec order.
    pub fn static_names(&self) -> Vec<&str> {
        self.variables
            .iter()
            .filter(|v| !v.is_dynamic)
            .map(|v| v.name.as_str())
            .collect()
    }

    /// Position of a variable within the dynamic (or static) ordering.
    pub fn channel_of(&self, var_index: usize) -> usize {
        let target = &self.variables[var_index];
        self.variables
            .iter()
            .take(var_index)
            .filter(|v| v.is_dynamic == target.is_dynamic)
            .count()
    }
}

/// Per-variable location/scale statistics, computed on the training split
/// only. Constant variables get sigma = 1 and a warning so normalization
/// never divides by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(names: Vec<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if names.len() != mean.len() || mean.len() != std.len() {
            return Err(Error::Invalid("stats arrays must align".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("sigma must be strictly positive".into()));
        }
        Ok(NormalizationStats { names, mean, std })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn normalize(&self, idx: usize, x: f64) -> f64 {
        (x - self.mean[idx]) / self.std[idx]
    }

    pub fn denormalize(&self, idx: usize, z: f64) -> f64 {
        z * self.std[idx] + self.mean[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VariableGroupSpec {
        VariableGroupSpec::new(&[
            ("Climate", &[("aridity", false), ("mean_p", false)]),
            ("Soil", &[("clay", false), ("sand", false)]),
            ("Forcing_precip", &[("precip", true)]),
        ])
        .unwrap()
    }

    #[test]
    fn partition_rejects_duplicates() {
        let err = VariableGroupSpec::new(&[
            ("A", &[("x", false)]),
            ("B", &[("x", false)]),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn round_trips_text_format() {
        let s = spec();
        let text = s.to_text();
        let parsed = VariableGroupSpec::parse(&text).unwrap();
        assert_eq!(s, parsed);
        assert!(text.contains("precip*"));
    }

    #[test]
    fn group_of_respects_membership() {
        let s = spec();
        let clay = s.variable_index("clay").unwrap();
        assert_eq!(s.groups()[s.group_of(clay)].name, "Soil");
    }

    #[test]
    fn channel_numbering_splits_dynamics_and_statics() {
        let s = spec();
        let precip = s.variable_index("precip").unwrap();
        assert_eq!(s.channel_of(precip), 0);
        let sand = s.variable_index("sand").unwrap();
        assert_eq!(s.channel_of(sand), 3);
        assert_eq!(s.dynamic_names(), alloc::vec!["precip"]);
        assert_eq!(s.static_names().len(), 4);
    }

    #[test]
    fn stats_reject_non_positive_sigma() {
        let err = NormalizationStats::new(
            alloc::vec!["x".into()],
            alloc::vec![0.0],
            alloc::vec![0.0],
        );
        assert!(err.is_err());
    }
}
