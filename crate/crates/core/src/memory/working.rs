use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum WorkingEntry {
    Observation { turn_index: u64, text: String },
    AgentTurn { turn_index: u64, agent_id: String, display_name: String, text: String },
}

impl WorkingEntry {
    pub fn render(&self) -> String {
        match self {
            WorkingEntry::Observation { text, .. } => text.clone(),
            WorkingEntry::AgentTurn { display_name, text, .. } => format!("{display_name}: {text}"),
        }
    }
}

/// Sliding window of the latest `capacity` entries. Never persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingMemory {
    session_id: String,
    capacity: usize,
    window: VecDeque<WorkingEntry>,
}

impl WorkingMemory {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(session_id: &str, capacity: usize) -> Self {
        assert!(capacity > 0, "working memory capacity must be positive");
        Self {
            session_id: session_id.to_string(),
            capacity,
            window: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// Appends `entry`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, entry: WorkingEntry) {
        self.window.push_back(entry);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
    }

    pub fn reset(&mut self, session_id: &str) {
        self.session_id = session_id.to_string();
        self.window.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &WorkingEntry> {
        self.window.iter()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn lines(&self) -> Vec<String> {
        self.window.iter().map(WorkingEntry::render).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(i: u64) -> WorkingEntry {
        WorkingEntry::Observation {
            turn_index: i,
            text: format!("o{i}"),
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut wm = WorkingMemory::new("s", 10);
        assert!(wm.is_empty());
        for i in 1..=12 {
            wm.push(obs(i));
        }
        assert_eq!(wm.lines(), (3..=12).map(|i| format!("o{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn single_push_and_reset() {
        let mut wm = WorkingMemory::new("s", 3);
        wm.push(WorkingEntry::AgentTurn {
            turn_index: 0,
            agent_id: "a".into(),
            display_name: "Nao-A".into(),
            text: "Hi".into(),
        });
        assert_eq!(wm.lines(), ["Nao-A: Hi"]);
        wm.reset("s2");
        assert_eq!((wm.len(), wm.session_id()), (0, "s2"));
    }

    proptest! {
        #[test]
        fn window_keeps_exactly_the_newest(k in 1usize..20, n in 0u64..60) {
            let mut wm = WorkingMemory::new("s", k);
            for i in 0..n {
                wm.push(obs(i));
                prop_assert!(wm.len() <= k);
            }
            let start = n.saturating_sub(k as u64);
            let expected: Vec<String> = (start..n).map(|i| format!("o{i}")).collect();
            prop_assert_eq!(wm.lines(), expected);
        }
    }
}
