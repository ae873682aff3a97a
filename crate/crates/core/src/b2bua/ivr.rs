//! Automated attendant menu as a pure state machine. The caller of these
//! methods plays prompts and performs transfers; this only decides.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use crate::clock::UnixMs;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IvrMenu {
    pub greeting_file: Option<PathBuf>,
    pub invalid_file: Option<PathBuf>,
    pub digit_map: BTreeMap<char, String>,
    pub timeout: Duration,
    pub max_attempts: u32,
}

impl Default for IvrMenu {
    fn default() -> Self {
        Self {
            greeting_file: None,
            invalid_file: None,
            digit_map: BTreeMap::new(),
            timeout: Duration::from_secs(5),
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prompt {
    Greeting,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IvrAction {
    Play(Prompt),
    Transfer(String),
    Hangup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Playing(Prompt),
    Waiting { deadline: UnixMs },
    Done,
}

#[derive(Debug, Clone)]
pub struct Ivr {
    menu: IvrMenu,
    failures: u32,
    phase: Phase,
}

impl Ivr {
    /// Starts the menu; the first action is always the greeting.
    pub fn start(menu: IvrMenu) -> (Self, IvrAction) {
        let ivr = Self {
            menu,
            failures: 0,
            phase: Phase::Playing(Prompt::Greeting),
        };
        (ivr, IvrAction::Play(Prompt::Greeting))
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn deadline(&self) -> Option<UnixMs> {
        match self.phase {
            Phase::Waiting { deadline } => Some(deadline),
            _ => None,
        }
    }

    /// The prompt being played ran out.
    pub fn prompt_finished(&mut self, now: UnixMs) -> Option<IvrAction> {
        match self.phase {
            Phase::Playing(Prompt::Greeting) => {
                self.phase = Phase::Waiting {
                    deadline: now + self.menu.timeout.as_millis() as u64,
                };
                None
            }
            Phase::Playing(Prompt::Invalid) => {
                self.phase = Phase::Playing(Prompt::Greeting);
                Some(IvrAction::Play(Prompt::Greeting))
            }
            _ => None,
        }
    }

    /// A digit arrived; prompts may be interrupted.
    pub fn digit(&mut self, d: char) -> Option<IvrAction> {
        if self.phase == Phase::Done {
            return None;
        }
        match self.menu.digit_map.get(&d) {
            Some(ext) => {
                self.phase = Phase::Done;
                Some(IvrAction::Transfer(ext.clone()))
            }
            None => Some(self.invalid()),
        }
    }

    pub fn tick(&mut self, now: UnixMs) -> Option<IvrAction> {
        match self.phase {
            Phase::Waiting { deadline } if now >= deadline => Some(self.invalid()),
            _ => None,
        }
    }

    fn invalid(&mut self) -> IvrAction {
        self.failures += 1;
        if self.failures >= self.menu.max_attempts {
            self.phase = Phase::Done;
            IvrAction::Hangup
        } else {
            self.phase = Phase::Playing(Prompt::Invalid);
            IvrAction::Play(Prompt::Invalid)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn menu() -> IvrMenu {
        IvrMenu {
            digit_map: [('1', "2001".to_string()), ('2', "2002".to_string())].into(),
            ..IvrMenu::default()
        }
    }

    #[test]
    fn mapped_digit_transfers() {
        let (mut ivr, first) = Ivr::start(menu());
        assert_eq!(first, IvrAction::Play(Prompt::Greeting));
        assert_eq!(ivr.prompt_finished(0), None);
        assert_eq!(ivr.digit('2'), Some(IvrAction::Transfer("2002".into())));
        assert!(ivr.is_done());
        assert_eq!(ivr.digit('1'), None);
    }

    #[test]
    fn three_invalid_digits_hang_up() {
        let (mut ivr, _) = Ivr::start(menu());
        assert_eq!(ivr.digit('7'), Some(IvrAction::Play(Prompt::Invalid)));
        assert_eq!(ivr.prompt_finished(10), Some(IvrAction::Play(Prompt::Greeting)));
        assert_eq!(ivr.digit('8'), Some(IvrAction::Play(Prompt::Invalid)));
        assert_eq!(ivr.digit('9'), Some(IvrAction::Hangup));
        assert!(ivr.is_done());
    }

    #[test]
    fn silence_replays_invalid_prompt() {
        let (mut ivr, _) = Ivr::start(menu());
        ivr.prompt_finished(1000);
        assert_eq!(ivr.deadline(), Some(6000));
        assert_eq!(ivr.tick(5999), None);
        assert_eq!(ivr.tick(6000), Some(IvrAction::Play(Prompt::Invalid)));
        assert_eq!(ivr.failures(), 1);
    }

    #[derive(Debug, Clone)]
    enum Input {
        Digit(char),
        PromptDone,
        Tick(u64),
    }

    fn input() -> impl Strategy<Value = Input> {
        prop_oneof![
            proptest::char::range('0', '9').prop_map(Input::Digit),
            Just(Input::PromptDone),
            (0u64..20_000).prop_map(Input::Tick),
        ]
    }

    proptest! {
        #[test]
        fn attempts_are_capped(inputs in prop::collection::vec(input(), 0..80)) {
            let m = menu();
            let (mut ivr, _) = Ivr::start(m.clone());
            let mut now = 0;
            let mut terminal = 0;
            for i in inputs {
                let act = match i {
                    Input::Digit(d) => ivr.digit(d),
                    Input::PromptDone => ivr.prompt_finished(now),
                    Input::Tick(dt) => { now += dt; ivr.tick(now) }
                };
                match act {
                    Some(IvrAction::Transfer(ext)) => {
                        terminal += 1;
                        prop_assert!(m.digit_map.values().any(|v| *v == ext));
                    }
                    Some(IvrAction::Hangup) => {
                        terminal += 1;
                        prop_assert_eq!(ivr.failures(), m.max_attempts);
                    }
                    _ => {}
                }
                prop_assert!(ivr.failures() <= m.max_attempts);
            }
            prop_assert!(terminal <= 1);
        }
    }
}
