//! Wait-k read/write scheduling over packet streams.
//!
//! The scheduler owns every READ/WRITE decision. In synchronous mode all
//! target languages share one `k` and write together; in asynchronous mode
//! language `j` may write as soon as `k_j` packets have been read. After the
//! source is exhausted every unfinished language is granted one write per
//! step until it finishes or hits the length cap.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::TargetLanguage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("schedule has no target languages")]
    NoLanguages,
    #[error("k must be >= 1 (language {0})")]
    InvalidK(TargetLanguage),
    #[error("synchronous schedule requires one k for all languages, got {0:?}")]
    UnequalK(BTreeMap<TargetLanguage, usize>),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    mode: Mode,
    k: BTreeMap<TargetLanguage, usize>,
}

impl Schedule {
    pub fn sync(languages: impl IntoIterator<Item = TargetLanguage>, k: usize) -> Result<Self, PolicyError> {
        Self::new(Mode::Sync, languages.into_iter().map(|l| (l, k)).collect())
    }

    pub fn asynchronous(k: BTreeMap<TargetLanguage, usize>) -> Result<Self, PolicyError> {
        Self::new(Mode::Async, k)
    }

    pub fn new(mode: Mode, k: BTreeMap<TargetLanguage, usize>) -> Result<Self, PolicyError> {
        if k.is_empty() {
            return Err(PolicyError::NoLanguages);
        }
        if let Some((lang, _)) = k.iter().find(|(_, &v)| v == 0) {
            return Err(PolicyError::InvalidK(lang.clone()));
        }
        if mode == Mode::Sync {
            let first = *k.values().next().unwrap();
            if k.values().any(|&v| v != first) {
                return Err(PolicyError::UnequalK(k));
            }
        }
        Ok(Self { mode, k })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn k_map(&self) -> &BTreeMap<TargetLanguage, usize> {
        &self.k
    }

    pub fn k(&self, lang: &TargetLanguage) -> Option<usize> {
        self.k.get(lang).copied()
    }

    /// Languages in write order.
    pub fn languages(&self) -> impl Iterator<Item = &TargetLanguage> {
        self.k.keys()
    }
}

/// Packets read before writing target token `t` under wait-k:
/// `min(k + t - 1, src_len)`.
pub fn g_of_t(k: usize, t: usize, src_len: usize) -> usize {
    debug_assert!(k >= 1 && t >= 1);
    (k + t - 1).min(src_len)
}

/// Cap on emitted tokens per language for a source of `src_len` packets.
pub fn max_target_len(src_len: usize) -> usize {
    2 * src_len + 10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Read,
    Write { lang: TargetLanguage, slot: usize },
    Finish { lang: TargetLanguage, truncated: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LanguageState {
    pub emitted: usize,
    pub finished: bool,
    pub truncated: bool,
    /// Packets read before each write.
    pub g: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    src_len: usize,
    packets_read: usize,
    max_len: usize,
    k: BTreeMap<TargetLanguage, usize>,
    langs: BTreeMap<TargetLanguage, LanguageState>,
}

impl SessionState {
    pub fn new(schedule: &Schedule, src_len: usize) -> Self {
        Self {
            src_len,
            packets_read: 0,
            max_len: max_target_len(src_len),
            k: schedule.k.clone(),
            langs: schedule
                .languages()
                .map(|l| (l.clone(), LanguageState::default()))
                .collect(),
        }
    }

    pub fn packets_read(&self) -> usize {
        self.packets_read
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn source_exhausted(&self) -> bool {
        self.packets_read >= self.src_len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn language(&self, lang: &TargetLanguage) -> Option<&LanguageState> {
        self.langs.get(lang)
    }

    pub fn languages(&self) -> &BTreeMap<TargetLanguage, LanguageState> {
        &self.langs
    }

    pub fn all_finished(&self) -> bool {
        self.langs.values().all(|l| l.finished)
    }

    /// Actions for the next step under the session's own schedule.
    pub fn next_actions(&self) -> Vec<Action> {
        self.actions_with(|lang| self.k[lang])
    }

    fn actions_with(&self, k_of: impl Fn(&TargetLanguage) -> usize) -> Vec<Action> {
        if self.all_finished() {
            return Vec::new();
        }
        let exhausted = self.source_exhausted();
        let mut actions: Vec<Action> = self
            .langs
            .iter()
            .filter(|(lang, st)| !st.finished && (exhausted || self.packets_read >= k_of(lang)))
            .map(|(lang, st)| {
                if st.emitted >= self.max_len {
                    Action::Finish {
                        lang: lang.clone(),
                        truncated: true,
                    }
                } else {
                    Action::Write {
                        lang: lang.clone(),
                        slot: st.emitted + 1,
                    }
                }
            })
            .collect();
        if !exhausted {
            actions.push(Action::Read);
        }
        actions
    }

    pub fn advance(&mut self, action: &Action) -> Result<(), PolicyError> {
        let violation = |msg: String| Err(PolicyError::ProtocolViolation(msg));
        match action {
            Action::Read => {
                if self.source_exhausted() {
                    return violation("READ after the source was exhausted".into());
                }
                self.packets_read += 1;
            }
            Action::Write { lang, slot } => {
                let k = self.k.get(lang).copied();
                let packets_read = self.packets_read;
                let exhausted = self.source_exhausted();
                let max_len = self.max_len;
                let Some(st) = self.langs.get_mut(lang) else {
                    return violation(format!("WRITE to unscheduled language {lang}"));
                };
                if st.finished {
                    return violation(format!("WRITE to finished language {lang}"));
                }
                if *slot != st.emitted + 1 {
                    return violation(format!("WRITE({lang}, {slot}) but {} tokens were emitted", st.emitted));
                }
                if !exhausted && packets_read < k.unwrap_or(usize::MAX) {
                    return violation(format!("WRITE({lang}, {slot}) after only {packets_read} packets"));
                }
                if st.emitted >= max_len {
                    return violation(format!("WRITE({lang}) beyond the length cap {max_len}"));
                }
                st.emitted += 1;
                st.g.push(packets_read);
            }
            Action::Finish { lang, truncated } => {
                let max_len = self.max_len;
                let Some(st) = self.langs.get_mut(lang) else {
                    return violation(format!("FINISH of unscheduled language {lang}"));
                };
                if st.finished {
                    return violation(format!("FINISH of finished language {lang}"));
                }
                if *truncated && st.emitted < max_len {
                    return violation(format!("truncation of {lang} below the length cap"));
                }
                st.finished = true;
                st.truncated = *truncated;
            }
        }
        Ok(())
    }
}

/// Synchronous wait-k step: every unfinished language writes once `|x| >= k`.
pub fn next_actions_sync(state: &SessionState, k: usize) -> Vec<Action> {
    state.actions_with(|_| k)
}

/// Asynchronous wait-k step: language `j` writes once `|x| >= k_j`.
pub fn next_actions_async(state: &SessionState, k_map: &BTreeMap<TargetLanguage, usize>) -> Vec<Action> {
    state.actions_with(|lang| k_map.get(lang).copied().unwrap_or(usize::MAX))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn lang(tag: &str) -> TargetLanguage {
        TargetLanguage::new(tag).unwrap()
    }

    fn es_fr(k_es: usize, k_fr: usize) -> Schedule {
        Schedule::asynchronous([(lang("es"), k_es), (lang("fr"), k_fr)].into()).unwrap()
    }

    /// Drive a session where language `j` emits `lens[j]` tokens then EOS.
    /// Returns the action trace, the final state, and the state just before
    /// every READ (after that step's writes).
    pub(crate) fn drive(
        schedule: &Schedule,
        src_len: usize,
        lens: &BTreeMap<TargetLanguage, usize>,
    ) -> (Vec<Action>, SessionState, Vec<SessionState>) {
        let mut state = SessionState::new(schedule, src_len);
        let mut trace = Vec::new();
        let mut snapshots = Vec::new();
        loop {
            let actions = state.next_actions();
            if actions.is_empty() {
                break;
            }
            for action in actions {
                if state.all_finished() {
                    break;
                }
                let applied = match &action {
                    Action::Write { lang, slot } if *slot > lens[lang] => Action::Finish {
                        lang: lang.clone(),
                        truncated: false,
                    },
                    other => other.clone(),
                };
                if applied == Action::Read {
                    snapshots.push(state.clone());
                }
                state.advance(&applied).unwrap();
                trace.push(applied);
            }
        }
        (trace, state, snapshots)
    }

    /// Independent brute force: walk the packets one at a time and record how
    /// many have been read when each write happens.
    fn brute_force_g(k: usize, src_len: usize, writes: usize) -> Vec<usize> {
        let mut g = Vec::new();
        let mut read = 0;
        while g.len() < writes {
            if read < src_len && read < k + g.len() {
                read += 1;
            } else {
                g.push(read);
            }
        }
        g
    }

    #[test]
    fn g_of_t_examples() {
        assert_eq!(g_of_t(3, 1, 10), 3);
        assert_eq!(g_of_t(6, 8, 10), 10);
        let oracle = brute_force_g(3, 10, 5);
        assert_eq!(oracle[4], 7);
        assert_eq!(g_of_t(3, 5, 10), oracle[4]);
    }

    #[test]
    fn sync_reads_until_k() {
        let s = Schedule::sync([lang("es"), lang("fr")], 6).unwrap();
        let mut st = SessionState::new(&s, 10);
        for _ in 0..5 {
            st.advance(&Action::Read).unwrap();
        }
        assert_eq!(next_actions_sync(&st, 6), vec![Action::Read]);
        st.advance(&Action::Read).unwrap();
        assert_eq!(
            next_actions_sync(&st, 6),
            vec![
                Action::Write {
                    lang: lang("es"),
                    slot: 1
                },
                Action::Write {
                    lang: lang("fr"),
                    slot: 1
                },
                Action::Read,
            ]
        );
    }

    #[test]
    fn tail_drain_only_grants_unfinished() {
        let s = Schedule::sync([lang("es"), lang("fr")], 1).unwrap();
        let mut st = SessionState::new(&s, 1);
        st.advance(&Action::Read).unwrap();
        st.advance(&Action::Write {
            lang: lang("es"),
            slot: 1,
        })
        .unwrap();
        st.advance(&Action::Write {
            lang: lang("fr"),
            slot: 1,
        })
        .unwrap();
        st.advance(&Action::Finish {
            lang: lang("es"),
            truncated: false,
        })
        .unwrap();
        assert!(st.source_exhausted());
        assert_eq!(
            next_actions_sync(&st, 1),
            vec![Action::Write {
                lang: lang("fr"),
                slot: 2
            }]
        );
    }

    #[test]
    fn async_case_split() {
        let s = es_fr(4, 6);
        let mut st = SessionState::new(&s, 10);
        for _ in 0..3 {
            st.advance(&Action::Read).unwrap();
        }
        assert_eq!(next_actions_async(&st, s.k_map()), vec![Action::Read]);
        st.advance(&Action::Read).unwrap();
        assert_eq!(
            next_actions_async(&st, s.k_map()),
            vec![
                Action::Write {
                    lang: lang("es"),
                    slot: 1
                },
                Action::Read
            ]
        );
    }

    #[test]
    fn async_at_six_packets() {
        let s = es_fr(4, 6);
        let lens = [(lang("es"), 20), (lang("fr"), 20)].into();
        let (_, _, snaps) = drive(&s, 10, &lens);
        let after_writes = snaps.iter().find(|st| st.packets_read() == 6).unwrap();
        assert_eq!(after_writes.language(&lang("es")).unwrap().g, vec![4, 5, 6]);
        assert_eq!(after_writes.language(&lang("fr")).unwrap().g, vec![6]);
        // Reconstruct by hand: es wrote at |x|=4 and 5, so slot 3 is next.
        let mut st = SessionState::new(&s, 10);
        for _ in 0..4 {
            st.advance(&Action::Read).unwrap();
        }
        st.advance(&Action::Write {
            lang: lang("es"),
            slot: 1,
        })
        .unwrap();
        st.advance(&Action::Read).unwrap();
        st.advance(&Action::Write {
            lang: lang("es"),
            slot: 2,
        })
        .unwrap();
        st.advance(&Action::Read).unwrap();
        assert_eq!(st.packets_read(), 6);
        assert_eq!(
            next_actions_async(&st, s.k_map()),
            vec![
                Action::Write {
                    lang: lang("es"),
                    slot: 3
                },
                Action::Write {
                    lang: lang("fr"),
                    slot: 1
                },
                Action::Read,
            ]
        );
    }

    #[test]
    fn advance_examples() {
        let s = es_fr(4, 6);
        let mut st = SessionState::new(&s, 10);
        st.advance(&Action::Read).unwrap();
        st.advance(&Action::Read).unwrap();
        st.advance(&Action::Read).unwrap();
        assert_eq!(st.packets_read(), 3);
        for _ in 0..3 {
            st.advance(&Action::Read).unwrap();
        }
        st.advance(&Action::Write {
            lang: lang("fr"),
            slot: 1,
        })
        .unwrap();
        assert_eq!(st.language(&lang("fr")).unwrap().g, vec![6]);
        let err = st.advance(&Action::Write {
            lang: lang("es"),
            slot: 2,
        });
        assert!(matches!(err, Err(PolicyError::ProtocolViolation(_))));
    }

    #[test]
    fn illegal_actions_are_rejected() {
        let s = es_fr(2, 2);
        let mut st = SessionState::new(&s, 2);
        assert!(st
            .advance(&Action::Write {
                lang: lang("es"),
                slot: 1
            })
            .is_err());
        st.advance(&Action::Read).unwrap();
        st.advance(&Action::Read).unwrap();
        assert!(st.advance(&Action::Read).is_err());
        st.advance(&Action::Finish {
            lang: lang("es"),
            truncated: false,
        })
        .unwrap();
        assert!(st
            .advance(&Action::Write {
                lang: lang("es"),
                slot: 1
            })
            .is_err());
        assert!(st
            .advance(&Action::Write {
                lang: lang("de"),
                slot: 1
            })
            .is_err());
        assert!(st
            .advance(&Action::Finish {
                lang: lang("fr"),
                truncated: true
            })
            .is_err());
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(Schedule::sync([lang("es")], 0), Err(PolicyError::InvalidK(lang("es"))));
        assert!(Schedule::new(Mode::Sync, [(lang("es"), 4), (lang("fr"), 6)].into()).is_err());
        assert_eq!(Schedule::asynchronous(BTreeMap::new()), Err(PolicyError::NoLanguages));
    }

    #[test]
    fn k_beyond_stream_drains_at_source_length() {
        let s = Schedule::sync([lang("es")], 8).unwrap();
        let (_, st, _) = drive(&s, 3, &[(lang("es"), 4)].into());
        assert_eq!(st.language(&lang("es")).unwrap().g, vec![3, 3, 3, 3]);
    }

    #[test]
    fn degenerate_agent_is_truncated_at_cap() {
        let s = Schedule::sync([lang("es")], 2).unwrap();
        let (trace, st, _) = drive(&s, 4, &[(lang("es"), usize::MAX)].into());
        let es = st.language(&lang("es")).unwrap();
        assert_eq!(es.emitted, max_target_len(4));
        assert!(es.truncated);
        assert_eq!(
            trace.last(),
            Some(&Action::Finish {
                lang: lang("es"),
                truncated: true
            })
        );
    }

    proptest! {
        #[test]
        fn token_count_law(src_len in 1usize..=200, k_es in 1usize..=10, k_fr in 1usize..=10) {
            let s = es_fr(k_es, k_fr);
            let lens = [(lang("es"), 1000), (lang("fr"), 1000)].into();
            let (_, _, snaps) = drive(&s, src_len, &lens);
            for st in snaps.iter().filter(|st| !st.source_exhausted()) {
                let m = st.packets_read();
                for (l, k) in s.k_map() {
                    let expected = (m + 1).saturating_sub(*k);
                    prop_assert_eq!(st.language(l).unwrap().emitted, expected);
                }
            }
        }

        #[test]
        fn async_with_equal_k_matches_sync(
            src_len in 1usize..=60, k in 1usize..=8, len_es in 1usize..=80, len_fr in 1usize..=80
        ) {
            let lens = [(lang("es"), len_es), (lang("fr"), len_fr)].into();
            let sync = Schedule::sync([lang("es"), lang("fr")], k).unwrap();
            let (a, _, _) = drive(&sync, src_len, &lens);
            let (b, _, _) = drive(&es_fr(k, k), src_len, &lens);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn g_record_follows_wait_k(
            src_len in 1usize..=60, k_es in 1usize..=8, k_fr in 1usize..=8,
            len_es in 1usize..=40, len_fr in 1usize..=40
        ) {
            let s = es_fr(k_es, k_fr);
            let lens: BTreeMap<_, _> = [(lang("es"), len_es), (lang("fr"), len_fr)].into();
            let (trace, st, _) = drive(&s, src_len, &lens);
            let (trace2, _, _) = drive(&s, src_len, &lens);
            prop_assert_eq!(&trace, &trace2);
            for (l, k) in s.k_map() {
                let g = &st.language(l).unwrap().g;
                let expected: Vec<_> = (1..=g.len()).map(|t| g_of_t(*k, t, src_len)).collect();
                prop_assert_eq!(g, &expected);
                prop_assert!(g.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(g.iter().all(|&v| v <= src_len));
                prop_assert_eq!(g.len(), lens[l].min(max_target_len(src_len)));
            }
        }
    }
}
