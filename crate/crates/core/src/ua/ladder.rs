//! Per-actor record of signaling as the transaction user saw it.

use std::sync::Mutex;
use std::time::Instant;

use crate::sip::Message;

#[derive(Debug, Clone)]
pub struct LadderEntry {
    pub outgoing: bool,
    pub msg: Message,
    pub at: Instant,
}

/// Retransmissions and 100 Trying never reach the ladder; everything else
/// an agent decides to send or accepts from its transaction layer does.
#[derive(Debug, Default)]
pub struct Ladder {
    entries: Mutex<Vec<LadderEntry>>,
}

impl Ladder {
    pub fn push(&self, outgoing: bool, msg: Message) {
        if let Message::Response(r) = &msg {
            if r.code() == 100 {
                return;
            }
        }
        self.entries.lock().unwrap().push(LadderEntry {
            outgoing,
            msg,
            at: Instant::now(),
        });
    }

    pub fn snapshot(&self) -> Vec<LadderEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }
}
