//! Thin layer over the Python parser: parsing, function shapes, import
//! bindings and identifier scanning.

use std::collections::BTreeSet;
use std::fmt;

use rustpython_parser::ast::{self, Constant, Expr, Ranged, Stmt};
use rustpython_parser::{lexer, Mode, Parse, StringKind, Tok};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub message: String,
    pub offset: usize,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.message, self.offset)
    }
}

impl std::error::Error for SyntaxError {}

pub fn parse_module(source: &str) -> Result<Vec<Stmt>, SyntaxError> {
    ast::Suite::parse(source, "<unit>").map_err(|e| SyntaxError {
        message: e.error.to_string(),
        offset: usize::from(e.offset),
    })
}

pub fn is_valid_module(source: &str) -> bool {
    parse_module(source).is_ok()
}

pub(crate) fn span(node: &impl Ranged) -> (usize, usize) {
    (usize::from(node.start()), usize::from(node.end()))
}

/// Location of a function's docstring literal within the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Docstring {
    pub text: String,
    /// Byte offset of the opening quote (including any prefix).
    pub start: usize,
    /// Byte offset just past the closing delimiter.
    pub end: usize,
}

/// Structural facts about one function definition, as byte offsets into the
/// source it was parsed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionShape {
    pub name: String,
    pub params: Vec<String>,
    /// Start of the first line of the definition, decorators included.
    pub start: usize,
    /// Offset of the `def` (or `async`) keyword.
    pub def_start: usize,
    /// Offset just past the header's terminating colon.
    pub header_end: usize,
    /// End of the last statement of the body.
    pub end: usize,
    pub docstring: Option<Docstring>,
}

impl FunctionShape {
    pub fn of(stmt: &Stmt, source: &str) -> Option<Self> {
        let (name, args, body, decorators) = match stmt {
            Stmt::FunctionDef(f) => (&f.name, &f.args, &f.body, &f.decorator_list),
            Stmt::AsyncFunctionDef(f) => (&f.name, &f.args, &f.body, &f.decorator_list),
            _ => return None,
        };
        let (def_start, end) = span(stmt);
        let first = decorators
            .iter()
            .map(|d| usize::from(d.start()))
            .min()
            .unwrap_or(def_start)
            .min(def_start);
        let start = source[..first].rfind('\n').map_or(0, |i| i + 1);
        let header_end = def_start + header_len(&source[def_start..end])?;
        let docstring = body.first().and_then(|s| docstring_of(s, source));
        Some(Self {
            name: name.to_string(),
            params: param_names(args),
            start,
            def_start,
            header_end,
            end,
            docstring,
        })
    }

    pub fn text<'s>(&self, source: &'s str) -> &'s str {
        &source[self.start..self.end]
    }

    pub fn signature<'s>(&self, source: &'s str) -> &'s str {
        &source[self.def_start..self.header_end]
    }
}

fn param_names(args: &ast::Arguments) -> Vec<String> {
    let mut names: Vec<String> = args
        .posonlyargs
        .iter()
        .chain(&args.args)
        .map(|a| a.def.arg.to_string())
        .collect();
    if let Some(v) = &args.vararg {
        names.push(format!("*{}", v.arg));
    }
    names.extend(args.kwonlyargs.iter().map(|a| a.def.arg.to_string()));
    if let Some(k) = &args.kwarg {
        names.push(format!("**{}", k.arg));
    }
    names
}

fn docstring_of(stmt: &Stmt, source: &str) -> Option<Docstring> {
    let Stmt::Expr(e) = stmt else { return None };
    let Expr::Constant(c) = e.value.as_ref() else {
        return None;
    };
    let Constant::Str(text) = &c.value else {
        return None;
    };
    let (start, end) = span(e.value.as_ref());
    debug_assert!(end <= source.len());
    Some(Docstring {
        text: text.clone(),
        start,
        end,
    })
}

/// Length of a `def` header up to and including the colon that opens the
/// body, found by lexing so colons in annotations or strings are skipped.
fn header_len(def_text: &str) -> Option<usize> {
    let mut depth = 0i32;
    for item in lexer::lex(def_text, Mode::Module) {
        let (tok, range) = item.ok()?;
        match tok {
            Tok::Lpar | Tok::Lsqb | Tok::Lbrace => depth += 1,
            Tok::Rpar | Tok::Rsqb | Tok::Rbrace => depth -= 1,
            Tok::Colon if depth == 0 => return Some(usize::from(range.end())),
            _ => {}
        }
    }
    None
}

/// What a top-level import statement binds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportBinding {
    pub text: String,
    pub root_package: String,
    /// Names introduced into the module namespace. `None` for `import *`.
    pub bound_names: Option<Vec<String>>,
}

/// Import bindings of one statement. `import a, b` yields one binding per
/// alias; relative imports yield nothing since they cannot resolve outside
/// their package.
pub fn import_bindings(stmt: &Stmt, source: &str) -> Vec<ImportBinding> {
    match stmt {
        Stmt::Import(imp) => {
            let whole = {
                let (s, e) = span(stmt);
                source[s..e].to_string()
            };
            imp.names
                .iter()
                .map(|alias| {
                    let module = alias.name.as_str();
                    let root = module.split('.').next().unwrap_or(module).to_string();
                    let bound = match &alias.asname {
                        Some(asname) => asname.to_string(),
                        None => root.clone(),
                    };
                    let text = if imp.names.len() == 1 {
                        whole.clone()
                    } else {
                        match &alias.asname {
                            Some(asname) => format!("import {module} as {asname}"),
                            None => format!("import {module}"),
                        }
                    };
                    ImportBinding {
                        text,
                        root_package: root,
                        bound_names: Some(vec![bound]),
                    }
                })
                .collect()
        }
        Stmt::ImportFrom(imp) => {
            let level = imp.level.as_ref().map_or(0, |l| l.to_u32());
            let Some(module) = imp.module.as_ref().filter(|_| level == 0) else {
                return Vec::new();
            };
            let root = module.split('.').next().unwrap_or(module).to_string();
            let star = imp.names.iter().any(|a| a.name.as_str() == "*");
            let bound = (!star).then(|| {
                imp.names
                    .iter()
                    .map(|a| a.asname.as_ref().unwrap_or(&a.name).to_string())
                    .collect()
            });
            let (s, e) = span(stmt);
            vec![ImportBinding {
                text: source[s..e].to_string(),
                root_package: root,
                bound_names: bound,
            }]
        }
        _ => Vec::new(),
    }
}

/// Every identifier-like token in `source`. Names inside f-string literals
/// are included as well; over-reporting is harmless for import slicing.
pub fn identifiers(source: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (tok, _) in lexer::lex(source, Mode::Module).flatten() {
        match tok {
            Tok::Name { name } => {
                out.insert(name);
            }
            Tok::String { value, kind, .. }
                if matches!(kind, StringKind::FString | StringKind::RawFString) =>
            {
                out.extend(words(&value));
            }
            _ => {}
        }
    }
    out
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| w.chars().next().is_some_and(|c| !c.is_ascii_digit()))
        .map(str::to_string)
}
