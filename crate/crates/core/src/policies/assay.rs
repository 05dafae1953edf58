//! Plain-text assay files.
//!
//! One group per line as comma-separated 0-based indices. Blank lines and
//! everything after `#` are ignored. A test-record file uses the same group
//! column followed by whitespace and the outcome `0` or `1`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Group, GroupBatch, TestOutcomes};

fn strip(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn parse_members(text: &str, line: usize) -> Result<Vec<usize>> {
    let members: Vec<usize> = text
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("expected an individual index, found {tok:?}"),
            })
        })
        .collect::<Result<_>>()?;
    let mut sorted = members.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != members.len() {
        return Err(Error::Parse {
            line,
            message: "duplicate individual in group".into(),
        });
    }
    Ok(members)
}

fn check_group(members: Vec<usize>, line: usize, n: usize, n_max: usize) -> Result<Group> {
    if members.len() > n_max {
        return Err(Error::config(format!(
            "line {line}: group of size {} exceeds n_max = {n_max}",
            members.len()
        )));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= n) {
        return Err(Error::config(format!(
            "line {line}: individual {bad} outside population of {n}"
        )));
    }
    Group::new(members, n)
}

/// Parses an assay matrix into groups over a population of `n`.
pub fn parse_assay(text: &str, n: usize, n_max: usize) -> Result<Vec<Group>> {
    let mut groups = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = strip(raw);
        if line.is_empty() {
            continue;
        }
        groups.push(check_group(parse_members(line, idx + 1)?, idx + 1, n, n_max)?);
    }
    Ok(groups)
}

pub fn load_assay(path: &Path, n: usize, n_max: usize) -> Result<Vec<Group>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_assay(&text, n, n_max)
}

/// Parses recorded tests (`members<whitespace>outcome`). The population is
/// one past the largest index unless `n` is given.
pub fn parse_test_records(text: &str, n: Option<usize>) -> Result<(GroupBatch, TestOutcomes)> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = strip(raw);
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (members, outcome) = line.rsplit_once(char::is_whitespace).ok_or_else(|| Error::Parse {
            line: lineno,
            message: "expected a group followed by an outcome".into(),
        })?;
        let y = match outcome {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("outcome must be 0 or 1, found {other:?}"),
                })
            }
        };
        let members: String = members.chars().filter(|c| !c.is_whitespace()).collect();
        rows.push((lineno, parse_members(&members, lineno)?, y));
    }
    let inferred = rows.iter().flat_map(|(_, m, _)| m.iter()).max().map_or(0, |&m| m + 1);
    let n = n.unwrap_or(inferred);
    let mut batch = GroupBatch::empty();
    let mut outcomes = Vec::new();
    for (line, members, y) in rows {
        batch.push(check_group(members, line, n, usize::MAX)?);
        outcomes.push(y);
    }
    Ok((batch, TestOutcomes::new(outcomes)))
}

/// A fixed design consumed front to back.
#[derive(Clone, Debug)]
pub struct FixedAssay {
    groups: Vec<Group>,
    cursor: usize,
}

impl FixedAssay {
    pub fn new(groups: Vec<Group>) -> Self {
        FixedAssay { groups, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.groups.len()
    }

    /// Next `d` unconsumed groups; empty once exhausted.
    pub fn take(&mut self, d: usize) -> Vec<Group> {
        let end = (self.cursor + d).min(self.groups.len());
        let out = self.groups[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assay_text(groups: usize, size: usize, n: usize) -> String {
        let mut s = String::from("# synthetic assay\n\n");
        for g in 0..groups {
            let members: Vec<String> = (0..size).map(|j| ((g * 7 + j * 3) % n).to_string()).collect();
            s.push_str(&members.join(","));
            s.push('\n');
        }
        s
    }

    #[test]
    fn cursor_mechanics() {
        let groups = parse_assay(&assay_text(22, 10, 70), 70, 10).unwrap();
        assert_eq!(groups.len(), 22);
        let mut a = FixedAssay::new(groups.clone());
        let first = a.take(8);
        assert_eq!(first, groups[..8].to_vec());
        assert_eq!(a.cursor(), 8);
        assert_eq!(a.take(8).len(), 8);
        assert_eq!(a.take(8).len(), 6);
        assert!(a.is_exhausted());
        assert!(a.take(8).is_empty());
        assert_eq!(a.cursor(), 22);
    }

    #[test]
    fn oversized_group_rejected() {
        let err = parse_assay(&assay_text(2, 11, 70), 70, 10).unwrap_err();
        assert!(matches!(err, Error::InvalidConfiguration(_)));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(parse_assay("1,2,x\n", 10, 10), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_assay("1,2\n\n3,3\n", 10, 10), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_assay("1,20\n", 10, 10), Err(Error::InvalidConfiguration(_))));
        assert_eq!(parse_assay("0, 1 # trailing\n", 10, 10).unwrap()[0].members(), &[0, 1]);
    }

    #[test]
    fn test_records() {
        let text = "# group outcome\n0,1,2 1\n3\t0\n2, 4   1\n";
        let (batch, outcomes) = parse_test_records(text, None).unwrap();
        assert_eq!(batch.member_lists(), vec![vec![0, 1, 2], vec![3], vec![2, 4]]);
        assert_eq!(outcomes.values(), &[true, false, true]);
        assert_eq!(batch.groups()[0].population(), 5);
        let (batch, _) = parse_test_records(text, Some(10)).unwrap();
        assert_eq!(batch.groups()[0].population(), 10);
        assert!(parse_test_records("0,1 2\n", None).is_err());
        assert!(parse_test_records("0,1\n", None).is_err());
        assert!(parse_test_records("0,1 1\n", Some(1)).is_err());
    }
}
