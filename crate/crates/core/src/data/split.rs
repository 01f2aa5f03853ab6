use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, LabeledSample, Pool};
use crate::error::{Error, Result};

/// Subjects drawn for training in the inter-subject protocol.
pub const INTER_TRAIN_SUBJECTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Train/val/test membership as sets of (subject, session) cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: BTreeSet<(u32, u32)>,
    pub val: BTreeSet<(u32, u32)>,
    pub test: BTreeSet<(u32, u32)>,
}

impl SplitSpec {
    fn cells(&self, role: Role) -> &BTreeSet<(u32, u32)> {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }

    pub fn matches(&self, role: Role, sample: &LabeledSample) -> bool {
        self.cells(role)
            .contains(&(sample.subject_id, sample.session_id))
    }

    pub fn select<'a>(&self, ds: &'a DatasetIndex, role: Role) -> Pool<'a> {
        ds.select(|s| self.matches(role, s))
    }

    pub fn subjects(&self, role: Role) -> Vec<u32> {
        self.cells(role)
            .iter()
            .map(|&(s, _)| s)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Errors if any cell belongs to more than one role.
    pub fn check_disjoint(&self) -> Result<()> {
        let pairs = [
            (&self.train, &self.val, "train/val"),
            (&self.train, &self.test, "train/test"),
            (&self.val, &self.test, "val/test"),
        ];
        for (a, b, name) in pairs {
            if let Some(cell) = a.intersection(b).next() {
                return Err(Error::Protocol(format!("{name} overlap at {cell:?}")));
            }
        }
        Ok(())
    }
}

/// Session 1 trains, session 2 validates, session 3 tests, all for one subject.
pub fn make_intra_split(ds: &DatasetIndex, subject_id: u32) -> Result<SplitSpec> {
    let sessions = ds.sessions_of(subject_id);
    if sessions.is_empty() {
        return Err(Error::Protocol(format!("subject {subject_id} not in dataset")));
    }
    for needed in 1..=3 {
        if !sessions.contains(&needed) {
            return Err(Error::Protocol(format!(
                "subject {subject_id} lacks session {needed} (has {sessions:?})"
            )));
        }
    }
    let one = |session| BTreeSet::from([(subject_id, session)]);
    Ok(SplitSpec {
        kind: SplitKind::Intra,
        train: one(1),
        val: one(2),
        test: one(3),
    })
}

/// Within `session_id`: `test_subject` tests, 12 random others train, the rest validate.
pub fn make_inter_split(
    ds: &DatasetIndex,
    session_id: u32,
    test_subject: u32,
    rng: &mut impl Rng,
) -> Result<SplitSpec> {
    let subjects: Vec<u32> = ds
        .subjects()
        .into_iter()
        .filter(|&s| ds.sessions_of(s).contains(&session_id))
        .collect();
    if !subjects.contains(&test_subject) {
        return Err(Error::Protocol(format!(
            "subject {test_subject} has no session {session_id}"
        )));
    }
    if subjects.len() < INTER_TRAIN_SUBJECTS + 2 {
        return Err(Error::Protocol(format!(
            "inter-subject protocol needs at least {} subjects in session {session_id}, found {}",
            INTER_TRAIN_SUBJECTS + 2,
            subjects.len()
        )));
    }
    let mut rest: Vec<u32> = subjects.into_iter().filter(|&s| s != test_subject).collect();
    rest.shuffle(rng);
    let (train, val) = rest.split_at(INTER_TRAIN_SUBJECTS);
    let cells = |ids: &[u32]| ids.iter().map(|&s| (s, session_id)).collect();
    let spec = SplitSpec {
        kind: SplitKind::Inter,
        train: cells(train),
        val: cells(val),
        test: BTreeSet::from([(test_subject, session_id)]),
    };
    spec.check_disjoint()?;
    Ok(spec)
}
