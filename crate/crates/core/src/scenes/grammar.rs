//! Template grammar for pick-and-place instructions:
//! `put the [adjective]? NOUN (on|in) the [adjective]? NOUN[.]`

use serde::{Deserialize, Serialize};

use super::spec::Relation;
use crate::error::{Error, Result};

/// Symbolic layout: roles plus spatial relations between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub instruction_text: String,
    pub background: String,
    pub robot: String,
    pub target: String,
    pub destination: String,
    pub distractors: Vec<String>,
    /// `(subject, relation, object)` triples over declared role names.
    pub relations: Vec<(String, Relation, String)>,
}

impl SceneGraph {
    pub fn new(target: &str, relation: Relation, destination: &str) -> Self {
        let mut g = SceneGraph {
            instruction_text: String::new(),
            background: "tabletop".into(),
            robot: "robot".into(),
            target: target.into(),
            destination: destination.into(),
            distractors: Vec::new(),
            relations: vec![(target.into(), relation, destination.into())],
        };
        g.instruction_text = render(&g);
        g
    }

    pub fn goal_relation(&self) -> Relation {
        self.relations
            .iter()
            .find(|(s, _, o)| *s == self.target && *o == self.destination)
            .map(|r| r.1)
            .expect("scene graph always carries its goal relation")
    }

    fn declared(&self, name: &str) -> bool {
        name == self.background
            || name == self.robot
            || name == self.target
            || name == self.destination
            || self.distractors.iter().any(|d| d == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() || self.destination.is_empty() {
            return Err(Error::config("scene graph needs a target and a destination"));
        }
        if !self.relations.iter().any(|(s, _, o)| *s == self.target && *o == self.destination) {
            return Err(Error::config("scene graph lacks the goal relation"));
        }
        if let Some((s, _, o)) = self.relations.iter().find(|(s, _, o)| !self.declared(s) || !self.declared(o)) {
            return Err(Error::config(format!("relation endpoint {s} or {o} is not a declared role")));
        }
        Ok(())
    }
}

pub fn render(graph: &SceneGraph) -> String {
    format!("put the {} {} the {}", graph.target, graph.goal_relation().word(), graph.destination)
}

struct Token<'a> {
    text: &'a str,
    position: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token { text: &text[s..i], position: s });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token { text: &text[s..], position: s });
    }
    out
}

fn is_word(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| c.is_alphanumeric() || c == '-')
}

fn expect(tokens: &[Token], i: usize, word: &str, end: usize) -> Result<()> {
    match tokens.get(i) {
        Some(t) if t.text == word => Ok(()),
        Some(t) => Err(Error::Parse { position: t.position, message: format!("expected '{word}', found '{}'", t.text) }),
        None => Err(Error::Parse { position: end, message: format!("expected '{word}', found end of input") }),
    }
}

/// Parses `[adjective]? NOUN` ending at `stop` (or end of input when `None`).
fn noun_phrase(tokens: &[Token], mut i: usize, stop: Option<&[&str]>, end: usize) -> Result<(String, usize)> {
    let mut words = Vec::new();
    while let Some(t) = tokens.get(i) {
        if stop.is_some_and(|s| s.contains(&t.text)) {
            break;
        }
        if !is_word(t.text) {
            return Err(Error::Parse { position: t.position, message: format!("unexpected token '{}'", t.text) });
        }
        if words.len() == 2 {
            return Err(Error::Parse {
                position: t.position,
                message: "noun phrase allows at most one adjective".into(),
            });
        }
        words.push(t.text);
        i += 1;
    }
    if words.is_empty() {
        let position = tokens.get(i).map_or(end, |t| t.position);
        return Err(Error::Parse { position, message: "expected a noun".into() });
    }
    Ok((words.join(" "), i))
}

/// Parses a templated instruction into a scene graph (no distractors yet).
pub fn parse_task(text: &str) -> Result<SceneGraph> {
    let lowered = text.trim_end().to_lowercase();
    let body = lowered.strip_suffix('.').unwrap_or(&lowered);
    let tokens = tokenize(body);
    let end = body.len();
    expect(&tokens, 0, "put", end)?;
    expect(&tokens, 1, "the", end)?;
    let (target, i) = noun_phrase(&tokens, 2, Some(&["on", "in"]), end)?;
    let relation = match tokens.get(i).map(|t| t.text) {
        Some("on") => Relation::On,
        Some("in") => Relation::In,
        _ => return Err(Error::Parse { position: end, message: "expected 'on' or 'in'".into() }),
    };
    expect(&tokens, i + 1, "the", end)?;
    let (destination, _) = noun_phrase(&tokens, i + 2, None, end)?;
    if target == destination {
        return Err(Error::Parse { position: 0, message: "target and destination must differ".into() });
    }
    let mut graph = SceneGraph::new(&target, relation, &destination);
    graph.instruction_text = text.to_string();
    Ok(graph)
}
