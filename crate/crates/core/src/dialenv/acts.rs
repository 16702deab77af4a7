use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

use super::ontology::Ontology;

/// Slot reference inside a domain: informable slots first, then requestables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Informable(usize),
    Requestable(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UserAct {
    Inform { domain: usize, slot: usize, value: usize },
    Request { domain: usize, slot: usize },
    Bye,
}

impl UserAct {
    pub fn domain(&self) -> Option<usize> {
        match *self {
            UserAct::Inform { domain, .. } | UserAct::Request { domain, .. } => Some(domain),
            UserAct::Bye => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemAct {
    Request { domain: usize, slot: usize },
    Offer { domain: usize },
    Provide { domain: usize, slot: Slot },
    Confirm { domain: usize, slot: usize },
    Inform { domain: usize, slot: usize },
    Bye,
    Fallback,
}

impl SystemAct {
    pub fn domain(&self) -> Option<usize> {
        match *self {
            SystemAct::Request { domain, .. }
            | SystemAct::Offer { domain }
            | SystemAct::Provide { domain, .. }
            | SystemAct::Confirm { domain, .. }
            | SystemAct::Inform { domain, .. } => Some(domain),
            SystemAct::Bye | SystemAct::Fallback => None,
        }
    }
}

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Token vocabulary built from the act templates. Index 0 is `<bos>`, 1 is `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(mut words: Vec<String>) -> Self {
        words.sort();
        words.dedup();
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Finite system action space with one canonical token rendering per act.
#[derive(Debug, Clone)]
pub struct ActionSpace {
    acts: Vec<SystemAct>,
    templates: Vec<Vec<String>>,
    token_ids: Vec<Vec<usize>>,
    by_act: HashMap<SystemAct, usize>,
    by_tokens: HashMap<Vec<usize>, usize>,
    vocab: Vocabulary,
    names: Vec<String>,
}

impl ActionSpace {
    pub fn new(ont: &Ontology) -> Self {
        let mut acts = Vec::new();
        for (d, dom) in ont.domains.iter().enumerate() {
            for s in 0..dom.informables.len() {
                acts.push(SystemAct::Request { domain: d, slot: s });
            }
            acts.push(SystemAct::Offer { domain: d });
            for s in 0..dom.informables.len() {
                acts.push(SystemAct::Provide { domain: d, slot: Slot::Informable(s) });
            }
            for r in 0..dom.requestables.len() {
                acts.push(SystemAct::Provide { domain: d, slot: Slot::Requestable(r) });
            }
            for s in 0..dom.informables.len() {
                acts.push(SystemAct::Confirm { domain: d, slot: s });
            }
            for s in 0..dom.informables.len() {
                acts.push(SystemAct::Inform { domain: d, slot: s });
            }
        }
        acts.push(SystemAct::Bye);
        acts.push(SystemAct::Fallback);

        let templates: Vec<Vec<String>> = acts.iter().map(|a| render(ont, a)).collect();
        let vocab = Vocabulary::from_tokens(templates.iter().flatten().cloned().collect());
        let token_ids: Vec<Vec<usize>> = templates
            .iter()
            .map(|t| vocab.encode(t).expect("template tokens are in the vocabulary"))
            .collect();
        let by_act = acts.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        let by_tokens: HashMap<Vec<usize>, usize> =
            token_ids.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        assert_eq!(by_tokens.len(), acts.len(), "act renderings must be distinct");
        let names = acts.iter().map(|a| describe(ont, a)).collect();
        ActionSpace {
            acts,
            templates,
            token_ids,
            by_act,
            by_tokens,
            vocab,
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn act(&self, id: usize) -> Result<SystemAct> {
        self.acts.get(id).copied().ok_or(Error::UnknownAction(id))
    }

    pub fn acts(&self) -> &[SystemAct] {
        &self.acts
    }

    pub fn id(&self, act: &SystemAct) -> Result<usize> {
        self.by_act
            .get(act)
            .copied()
            .ok_or_else(|| Error::invalid(format!("{act:?} is not a valid system act")))
    }

    pub fn template(&self, id: usize) -> &[String] {
        &self.templates[id]
    }

    pub fn tokens(&self, id: usize) -> &[usize] {
        &self.token_ids[id]
    }

    /// Maps a token-id sequence back to its act, if it is a valid rendering.
    pub fn parse(&self, tokens: &[usize]) -> Option<usize> {
        self.by_tokens.get(tokens).copied()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn max_template_len(&self) -> usize {
        self.templates.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn slot_name(ont: &Ontology, domain: usize, slot: Slot) -> &str {
    let d = &ont.domains[domain];
    match slot {
        Slot::Informable(s) => &d.informables[s].name,
        Slot::Requestable(r) => &d.requestables[r],
    }
}

fn delex(ont: &Ontology, domain: usize, slot: Slot) -> String {
    format!("[{}_{}]", ont.domains[domain].name, slot_name(ont, domain, slot))
}

fn render(ont: &Ontology, act: &SystemAct) -> Vec<String> {
    let dn = |d: usize| ont.domains[d].name.clone();
    let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    match *act {
        SystemAct::Request { domain, slot } => {
            let mut t = words(&["which"]);
            t.push(slot_name(ont, domain, Slot::Informable(slot)).to_string());
            t.extend(words(&["for", "the"]));
            t.push(dn(domain));
            t.push("?".into());
            t
        }
        SystemAct::Offer { domain } => {
            let mut t = words(&["i", "recommend"]);
            t.push(format!("[{}_name]", dn(domain)));
            t
        }
        SystemAct::Provide { domain, slot } => {
            let mut t = words(&["the"]);
            t.push(slot_name(ont, domain, slot).to_string());
            t.push("is".into());
            t.push(delex(ont, domain, slot));
            t
        }
        SystemAct::Confirm { domain, slot } => {
            let mut t = words(&["you", "want"]);
            t.push(delex(ont, domain, Slot::Informable(slot)));
            t.push(slot_name(ont, domain, Slot::Informable(slot)).to_string());
            t.push("right".into());
            t.push("?".into());
            t
        }
        SystemAct::Inform { domain, slot } => {
            let mut t = words(&["there", "are", "many"]);
            t.push(dn(domain));
            t.push("options".into());
            t.push("with".into());
            t.push("that".into());
            t.push(slot_name(ont, domain, Slot::Informable(slot)).to_string());
            t
        }
        SystemAct::Bye => words(&["thank", "you", "goodbye"]),
        SystemAct::Fallback => words(&["sorry", "i", "did", "not", "understand"]),
    }
}

fn describe(ont: &Ontology, act: &SystemAct) -> String {
    let dn = |d: usize| &ont.domains[d].name;
    match *act {
        SystemAct::Request { domain, slot } => {
            format!("request({},{})", dn(domain), slot_name(ont, domain, Slot::Informable(slot)))
        }
        SystemAct::Offer { domain } => format!("offer({})", dn(domain)),
        SystemAct::Provide { domain, slot } => format!("provide({},{})", dn(domain), slot_name(ont, domain, slot)),
        SystemAct::Confirm { domain, slot } => {
            format!("confirm({},{})", dn(domain), slot_name(ont, domain, Slot::Informable(slot)))
        }
        SystemAct::Inform { domain, slot } => {
            format!("inform({},{})", dn(domain), slot_name(ont, domain, Slot::Informable(slot)))
        }
        SystemAct::Bye => "bye".into(),
        SystemAct::Fallback => "fallback".into(),
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Informable(i) => write!(f, "i{i}"),
            Slot::Requestable(r) => write!(f, "r{r}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_space_size_and_templates() {
        let o = Ontology::miniwoz();
        let space = ActionSpace::new(&o);
        assert_eq!(space.len(), 34);
        for id in 0..space.len() {
            let n = space.template(id).len();
            assert!((3..=8).contains(&n), "{} has {n} tokens", space.name(id));
            assert_eq!(space.parse(space.tokens(id)), Some(id));
            assert_eq!(space.id(&space.act(id).unwrap()).unwrap(), id);
        }
        assert!(space.vocab().len() < 64);
        assert_eq!(space.vocab().token(0), BOS);
        assert!(matches!(space.act(34), Err(Error::UnknownAction(34))));
    }

    #[test]
    fn rendering_examples() {
        let o = Ontology::miniwoz();
        let space = ActionSpace::new(&o);
        let id = space
            .id(&SystemAct::Provide { domain: 0, slot: Slot::Requestable(1) })
            .unwrap();
        assert_eq!(space.template(id).join(" "), "the phone is [eatery_phone]");
        assert_eq!(space.name(id), "provide(eatery,phone)");
        assert!(matches!(space.vocab().id("pizza"), Err(Error::OutOfVocabulary(_))));
    }
}
