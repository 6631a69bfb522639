//! Recursive-descent reader for the DOT subset the exporter emits:
//! `digraph`, nested `subgraph`, node and edge statements, attribute lists,
//! graph-level `key=value` and `node [...]` defaults.

use std::collections::BTreeMap;

pub type Attrs = BTreeMap<String, String>;

#[derive(Debug, Default)]
pub struct Cluster {
    pub name: String,
    pub attrs: Attrs,
    pub nodes: Vec<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub name: String,
    pub nodes: BTreeMap<String, Attrs>,
    pub edges: Vec<(String, String, Attrs)>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Eq,
    Semi,
    Comma,
    Arrow,
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let mut it = src.chars().peekable();
    while let Some(&c) = it.peek() {
        match c {
            c if c.is_whitespace() => {
                it.next();
            }
            '{' | '}' | '[' | ']' | '=' | ';' | ',' => {
                it.next();
                out.push(match c {
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    '=' => Tok::Eq,
                    ';' => Tok::Semi,
                    _ => Tok::Comma,
                });
            }
            '-' => {
                it.next();
                match it.next() {
                    Some('>') => out.push(Tok::Arrow),
                    other => return Err(format!("expected `->`, found {other:?}")),
                }
            }
            '"' => {
                it.next();
                let mut s = String::new();
                loop {
                    match it.next() {
                        Some('"') => break,
                        Some('\\') => match it.next() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some(o) => {
                                s.push('\\');
                                s.push(o);
                            }
                            None => return Err("unterminated escape".into()),
                        },
                        Some(o) => s.push(o),
                        None => return Err("unterminated string".into()),
                    }
                }
                out.push(Tok::Id(s));
            }
            c if c.is_alphanumeric() || c == '_' || c == '.' => {
                let mut s = String::new();
                while let Some(&c) = it.peek() {
                    if c.is_alphanumeric() || c == '_' || c == '.' {
                        s.push(c);
                        it.next();
                    } else {
                        break;
                    }
                }
                out.push(Tok::Id(s));
            }
            other => return Err(format!("unexpected character {other:?}")),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<(), String> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(format!("expected {t:?}, found {got:?} at token {}", self.pos - 1)),
        }
    }

    fn id(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Tok::Id(s)) => Ok(s),
            got => Err(format!("expected identifier, found {got:?}")),
        }
    }

    fn attr_list(&mut self) -> Result<Attrs, String> {
        let mut attrs = Attrs::new();
        while self.peek() == Some(&Tok::LBracket) {
            self.next();
            while self.peek() != Some(&Tok::RBracket) {
                let k = self.id()?;
                self.expect(Tok::Eq)?;
                let v = self.id()?;
                attrs.insert(k, v);
                if matches!(self.peek(), Some(Tok::Comma) | Some(Tok::Semi)) {
                    self.next();
                }
            }
            self.expect(Tok::RBracket)?;
        }
        Ok(attrs)
    }

    fn stmt_list(&mut self, g: &mut Graph, members: &mut Vec<String>) -> Result<(), String> {
        self.expect(Tok::LBrace)?;
        loop {
            match self.peek() {
                Some(Tok::RBrace) => {
                    self.next();
                    return Ok(());
                }
                Some(Tok::Semi) => {
                    self.next();
                }
                None => return Err("unexpected end of input".into()),
                _ => self.stmt(g, members)?,
            }
        }
    }

    fn stmt(&mut self, g: &mut Graph, members: &mut Vec<String>) -> Result<(), String> {
        let head = self.id()?;
        match head.as_str() {
            "subgraph" => {
                let name = self.id()?;
                let mut inner = Vec::new();
                let idx = g.clusters.len();
                g.clusters.push(Cluster {
                    name,
                    ..Cluster::default()
                });
                let mut sub = Graph::default();
                self.stmt_list(&mut sub, &mut inner)?;
                g.clusters[idx].attrs = sub.nodes.remove("").unwrap_or_default();
                g.clusters[idx].nodes = inner.clone();
                g.nodes.extend(sub.nodes);
                g.edges.extend(sub.edges);
                g.clusters.extend(sub.clusters);
                members.extend(inner);
                Ok(())
            }
            "node" | "edge" | "graph" => {
                self.attr_list()?;
                Ok(())
            }
            _ => match self.peek() {
                Some(Tok::Eq) => {
                    self.next();
                    let v = self.id()?;
                    g.nodes.entry(String::new()).or_default().insert(head, v);
                    Ok(())
                }
                Some(Tok::Arrow) => {
                    let mut chain = vec![head];
                    while self.peek() == Some(&Tok::Arrow) {
                        self.next();
                        chain.push(self.id()?);
                    }
                    let attrs = self.attr_list()?;
                    for w in chain.windows(2) {
                        g.edges.push((w[0].clone(), w[1].clone(), attrs.clone()));
                    }
                    Ok(())
                }
                _ => {
                    let attrs = self.attr_list()?;
                    g.nodes.entry(head.clone()).or_default().extend(attrs);
                    members.push(head);
                    Ok(())
                }
            },
        }
    }
}

pub fn parse(src: &str) -> Result<Graph, String> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let kw = p.id()?;
    if kw != "digraph" {
        return Err(format!("expected digraph, found {kw}"));
    }
    let mut g = Graph::default();
    if let Some(Tok::Id(_)) = p.peek() {
        g.name = p.id()?;
    }
    let mut top = Vec::new();
    p.stmt_list(&mut g, &mut top)?;
    g.nodes.remove("");
    if p.pos != p.toks.len() {
        return Err("trailing tokens after graph".into());
    }
    Ok(g)
}
