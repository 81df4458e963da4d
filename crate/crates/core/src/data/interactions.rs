//! Chronological user sequences with leave-last-out splits.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::format::{read_file, write_file};

/// Which held-out position a context predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// The last item of the training prefix, predicted from the items before it.
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

impl UserSequence {
    /// Everything except the validation and test items.
    pub fn train(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// `(context, target)` for a split, or `None` when the context would be empty.
    pub fn context(&self, split: Split) -> Option<(&[usize], usize)> {
        let n = self.items.len();
        let cut = match split {
            Split::Train => n.checked_sub(3)?,
            Split::Valid => n - 2,
            Split::Test => n - 1,
        };
        if cut == 0 {
            return None;
        }
        Some((&self.items[..cut], self.items[cut]))
    }
}

/// Users whose sequences support a train prefix, a validation item and a test item.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    n_items: usize,
    users: Vec<UserSequence>,
    item_frequency: Vec<usize>,
    dropped_users: usize,
}

impl InteractionDataset {
    /// Validates item ids and drops users with fewer than three interactions.
    pub fn new(n_items: usize, raw: Vec<UserSequence>) -> Result<Self> {
        for u in &raw {
            if let Some(&bad) = u.items.iter().find(|&&i| i >= n_items) {
                return Err(Error::Config(format!(
                    "user {} references item {bad} but the catalog has {n_items} items",
                    u.user_id
                )));
            }
        }
        let before = raw.len();
        let users: Vec<UserSequence> = raw.into_iter().filter(|u| u.items.len() >= 3).collect();
        let dropped_users = before - users.len();
        if dropped_users > 0 {
            warn!("dropped {dropped_users} users with fewer than 3 interactions");
        }
        let mut item_frequency = vec![0usize; n_items];
        for u in &users {
            for &i in u.train() {
                item_frequency[i] += 1;
            }
        }
        Ok(InteractionDataset {
            n_items,
            users,
            item_frequency,
            dropped_users,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn dropped_users(&self) -> usize {
        self.dropped_users
    }

    /// Interaction counts over training prefixes only.
    pub fn item_frequency(&self) -> &[usize] {
        &self.item_frequency
    }

    pub fn total_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for u in &self.users {
            let _ = write!(s, "{}\t", u.user_id);
            for (k, i) in u.items.iter().enumerate() {
                if k > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{i}");
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the tab-separated interaction text without validating item ids.
pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<UserSequence>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let (user, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected user_id<TAB>items".into()))?;
        let user_id: u64 = user
            .trim()
            .parse()
            .map_err(|_| err(format!("bad user id '{user}'")))?;
        let items = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad item id '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(UserSequence { user_id, items });
    }
    Ok(out)
}

pub fn load_interactions(path: impl AsRef<Path>, n_items: usize) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
        message: "invalid UTF-8".into(),
    })?;
    let raw = parse_interactions(&text, path)?;
    for (lineno, u) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .zip(&raw)
    {
        if let Some(&bad) = u.items.iter().find(|&&i| i >= n_items) {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("unknown item id {bad} (catalog has {n_items} items)"),
            });
        }
    }
    InteractionDataset::new(n_items, raw)
}

pub fn save_interactions(dataset: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), dataset.to_text().as_bytes())
}

/// Removes users and items with fewer than `k` interactions until none remain.
///
/// Worklist formulation: each removal only re-examines the counts it touched.
pub fn k_core_filter(raw: &[UserSequence], k: usize) -> Vec<UserSequence> {
    let n_items = raw
        .iter()
        .flat_map(|u| u.items.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let mut item_count = vec![0usize; n_items];
    let mut item_users: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (ui, u) in raw.iter().enumerate() {
        for &i in &u.items {
            item_count[i] += 1;
            if item_users[i].last() != Some(&ui) {
                item_users[i].push(ui);
            }
        }
    }
    let mut user_count: Vec<usize> = raw.iter().map(|u| u.items.len()).collect();
    let mut user_alive = vec![true; raw.len()];
    let mut item_alive = vec![true; n_items];

    enum Work {
        User(usize),
        Item(usize),
    }
    let mut queue: VecDeque<Work> = VecDeque::new();
    for (u, &c) in user_count.iter().enumerate() {
        if c < k {
            queue.push_back(Work::User(u));
        }
    }
    for (i, &c) in item_count.iter().enumerate() {
        if c < k {
            queue.push_back(Work::Item(i));
        }
    }
    while let Some(w) = queue.pop_front() {
        match w {
            Work::User(u) => {
                if !user_alive[u] {
                    continue;
                }
                user_alive[u] = false;
                for &i in &raw[u].items {
                    if item_alive[i] {
                        item_count[i] -= 1;
                        if item_count[i] + 1 == k {
                            queue.push_back(Work::Item(i));
                        }
                    }
                }
            }
            Work::Item(i) => {
                if !item_alive[i] {
                    continue;
                }
                item_alive[i] = false;
                for &u in &item_users[i] {
                    if !user_alive[u] {
                        continue;
                    }
                    let occurrences = raw[u].items.iter().filter(|&&x| x == i).count();
                    user_count[u] -= occurrences;
                    if user_count[u] < k && user_count[u] + occurrences >= k {
                        queue.push_back(Work::User(u));
                    }
                }
            }
        }
    }
    let out: Vec<UserSequence> = raw
        .iter()
        .zip(&user_alive)
        .filter(|(_, &alive)| alive)
        .map(|(u, _)| UserSequence {
            user_id: u.user_id,
            items: u.items.iter().copied().filter(|&i| item_alive[i]).collect(),
        })
        .collect();
    if out.is_empty() && !raw.is_empty() {
        warn!("{k}-core filtering removed every user");
    }
    out
}

/// The standard 5-core filter.
pub fn five_core_filter(raw: &[UserSequence]) -> Vec<UserSequence> {
    k_core_filter(raw, 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user_id: u64, items: &[usize]) -> UserSequence {
        UserSequence {
            user_id,
            items: items.to_vec(),
        }
    }

    #[test]
    fn splits_follow_leave_last_out() {
        let u = seq(1, &[10, 11, 12, 13]);
        assert_eq!(u.train(), &[10, 11]);
        assert_eq!(u.valid(), 12);
        assert_eq!(u.test(), 13);
        assert_eq!(u.context(Split::Train), Some((&[10usize][..], 11)));
        assert_eq!(u.context(Split::Valid), Some((&[10usize, 11][..], 12)));
        assert_eq!(u.context(Split::Test), Some((&[10usize, 11, 12][..], 13)));
        assert_eq!(seq(2, &[1, 2, 3]).context(Split::Train), None);
    }

    #[test]
    fn short_users_are_dropped() {
        let ds = InteractionDataset::new(20, vec![seq(1, &[1, 2, 3, 4]), seq(2, &[5, 6])]).unwrap();
        assert_eq!(ds.users().len(), 1);
        assert_eq!(ds.dropped_users(), 1);
    }

    #[test]
    fn frequency_counts_only_training_prefixes() {
        let ds = InteractionDataset::new(5, vec![seq(1, &[0, 1, 2, 3]), seq(2, &[0, 0, 4])]).unwrap();
        assert_eq!(ds.item_frequency(), &[2, 1, 0, 0, 0]);
    }

    #[test]
    fn unknown_item_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.tsv");
        std::fs::write(&p, "1\t0 1 2\n\n2\t0 9 1\n").unwrap();
        match load_interactions(&p, 5).unwrap_err() {
            Error::Ingest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dense_corpus_is_a_fixed_point() {
        let users: Vec<UserSequence> = (0..6).map(|u| seq(u, &[0, 1, 2, 3, 4])).collect();
        assert_eq!(five_core_filter(&users), users);
    }

    #[test]
    fn rare_item_is_removed_and_users_rechecked() {
        let mut users: Vec<UserSequence> = (0..6).map(|u| seq(u, &[0, 1, 2, 3, 4])).collect();
        // user 6 has exactly five interactions, one of them on a singleton item
        users.push(seq(6, &[0, 1, 2, 3, 9]));
        let out = five_core_filter(&users);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|u| !u.items.contains(&9)));
    }
}
