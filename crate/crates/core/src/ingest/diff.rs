//! Unified diff parsing.
//!
//! Hunk bodies are consumed by the counts in their `@@` header. Blank lines
//! inside a body are taken as empty context lines (mailers and editors strip
//! the leading space), and a body that ends up to three lines short on both
//! sides is padded with empty context lines, the same leniency GNU patch
//! applies to trailing blank context.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const MAX_IMPLIED_BLANK_CONTEXT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineTag {
    Context,
    Added,
    Removed,
}

impl LineTag {
    fn prefix(self) -> char {
        match self {
            LineTag::Context => ' ',
            LineTag::Added => '+',
            LineTag::Removed => '-',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLine {
    pub tag: LineTag,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_count: usize,
    pub new_start: usize,
    pub new_count: usize,
    /// Trailing text after the closing `@@` (usually the enclosing function).
    pub section: String,
    /// Index into [`ParsedDiff::files_touched`], `None` for bare hunks.
    pub file: Option<usize>,
    pub lines: Vec<DiffLine>,
}

impl Hunk {
    pub fn added(&self) -> impl Iterator<Item = &DiffLine> {
        self.lines.iter().filter(|l| l.tag == LineTag::Added)
    }

    pub fn removed(&self) -> impl Iterator<Item = &DiffLine> {
        self.lines.iter().filter(|l| l.tag == LineTag::Removed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedDiff {
    pub hunks: Vec<Hunk>,
    pub files_touched: Vec<String>,
}

impl ParsedDiff {
    pub fn added_lines(&self) -> usize {
        self.hunks.iter().map(|h| h.added().count()).sum()
    }

    pub fn removed_lines(&self) -> usize {
        self.hunks.iter().map(|h| h.removed().count()).sum()
    }

    /// Renders the diff back to unified format. Re-parsing the output yields
    /// an identical `ParsedDiff`.
    pub fn to_unified_string(&self) -> String {
        let mut out = String::new();
        let emit_hunk = |out: &mut String, h: &Hunk| {
            let _ = write!(
                out,
                "@@ -{},{} +{},{} @@",
                h.old_start, h.old_count, h.new_start, h.new_count
            );
            if !h.section.is_empty() {
                out.push(' ');
                out.push_str(&h.section);
            }
            out.push('\n');
            for line in &h.lines {
                out.push(line.tag.prefix());
                out.push_str(&line.text);
                out.push('\n');
            }
        };
        for h in self.hunks.iter().filter(|h| h.file.is_none()) {
            emit_hunk(&mut out, h);
        }
        for (idx, path) in self.files_touched.iter().enumerate() {
            let _ = writeln!(out, "diff --git a/{path} b/{path}");
            let _ = writeln!(out, "--- a/{path}");
            let _ = writeln!(out, "+++ b/{path}");
            for h in self.hunks.iter().filter(|h| h.file == Some(idx)) {
                emit_hunk(&mut out, h);
            }
        }
        out
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedDiff {
        line,
        reason: reason.into(),
    }
}

fn parse_range(text: &str, line_no: usize) -> Result<(usize, usize)> {
    let (start, count) = match text.split_once(',') {
        Some((s, c)) => (s, Some(c)),
        None => (text, None),
    };
    let start = start
        .parse::<usize>()
        .map_err(|_| malformed(line_no, format!("bad range start {start:?}")))?;
    let count = match count {
        Some(c) => c
            .parse::<usize>()
            .map_err(|_| malformed(line_no, format!("bad range count {c:?}")))?,
        None => 1,
    };
    Ok((start, count))
}

/// Parses `@@ -a[,b] +c[,d] @@[ section]`.
fn parse_hunk_header(line: &str, line_no: usize) -> Result<Hunk> {
    let rest = line
        .strip_prefix("@@ -")
        .ok_or_else(|| malformed(line_no, "hunk header must start with \"@@ -\""))?;
    let (ranges, section) = rest
        .split_once(" @@")
        .ok_or_else(|| malformed(line_no, "hunk header missing closing \"@@\""))?;
    let (old, new) = ranges
        .split_once(" +")
        .ok_or_else(|| malformed(line_no, "hunk header missing new range"))?;
    let (old_start, old_count) = parse_range(old, line_no)?;
    let (new_start, new_count) = parse_range(new, line_no)?;
    Ok(Hunk {
        old_start,
        old_count,
        new_start,
        new_count,
        section: section.strip_prefix(' ').unwrap_or(section).to_string(),
        file: None,
        lines: Vec::new(),
    })
}

fn strip_path(raw: &str) -> Option<String> {
    let path = raw.split('\t').next().unwrap_or(raw).trim_end();
    if path == "/dev/null" {
        return None;
    }
    let path = path
        .strip_prefix("a/")
        .or_else(|| path.strip_prefix("b/"))
        .unwrap_or(path);
    Some(path.to_string())
}

struct Parser {
    diff: ParsedDiff,
    current_file: Option<usize>,
    /// A `---` line seen without `diff --git`; the `+++` line decides the path.
    pending_old_path: Option<Option<String>>,
    after_hunk: bool,
}

impl Parser {
    fn open_file(&mut self, path: String) {
        let idx = match self.diff.files_touched.iter().position(|p| *p == path) {
            Some(idx) => idx,
            None => {
                self.diff.files_touched.push(path);
                self.diff.files_touched.len() - 1
            }
        };
        self.current_file = Some(idx);
    }

    fn rename_current(&mut self, path: String) {
        match self.current_file {
            Some(idx) if !self.diff.hunks.iter().any(|h| h.file == Some(idx)) => {
                if self.diff.files_touched[idx] != path {
                    if self.diff.files_touched.contains(&path) {
                        self.open_file(path);
                    } else {
                        self.diff.files_touched[idx] = path;
                    }
                }
            }
            _ => self.open_file(path),
        }
    }
}

/// Parses a unified diff (plain or git-flavoured).
pub fn parse_unified_diff(text: &str) -> Result<ParsedDiff> {
    if text.trim().is_empty() {
        return Err(malformed(0, "empty diff"));
    }
    let lines: Vec<&str> = text.lines().collect();
    let mut p = Parser {
        diff: ParsedDiff::default(),
        current_file: None,
        pending_old_path: None,
        after_hunk: false,
    };
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let line_no = i + 1;
        if line.starts_with("@@") {
            let mut hunk = parse_hunk_header(line, line_no)?;
            hunk.file = p.current_file;
            i = read_hunk_body(&lines, i + 1, &mut hunk)?;
            p.diff.hunks.push(hunk);
            p.after_hunk = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix("diff --git ") {
            p.after_hunk = false;
            p.pending_old_path = None;
            let target = rest.rsplit_once(" b/").map(|(_, b)| b).unwrap_or(rest);
            p.current_file = None;
            p.open_file(target.to_string());
        } else if let Some(rest) = line.strip_prefix("--- ") {
            p.after_hunk = false;
            p.pending_old_path = Some(strip_path(rest));
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            p.after_hunk = false;
            let new_path = strip_path(rest);
            let old_path = p.pending_old_path.take().flatten();
            if let Some(path) = new_path.or(old_path) {
                p.rename_current(path);
            }
        } else if line == "-- " {
            // format-patch signature: nothing after it belongs to the diff
            break;
        } else if p.after_hunk
            && (line.starts_with('+') || line.starts_with('-') || line.starts_with(' '))
        {
            return Err(malformed(line_no, "hunk body longer than its header declares"));
        }
        // Anything else (index/mode lines, commit preamble, blank lines,
        // "\ No newline" markers) carries no hunk content.
        i += 1;
    }
    Ok(p.diff)
}

/// Consumes the body of `hunk` starting at `start`; returns the next line index.
fn read_hunk_body(lines: &[&str], start: usize, hunk: &mut Hunk) -> Result<usize> {
    let mut old_left = hunk.old_count;
    let mut new_left = hunk.new_count;
    let mut i = start;
    while old_left > 0 || new_left > 0 {
        let Some(&line) = lines.get(i) else { break };
        let line_no = i + 1;
        if line.starts_with("@@") || line.starts_with("diff --git ") {
            break;
        }
        let (tag, text) = match line.chars().next() {
            None => (LineTag::Context, ""),
            Some(' ') => (LineTag::Context, &line[1..]),
            Some('+') => (LineTag::Added, &line[1..]),
            Some('-') => (LineTag::Removed, &line[1..]),
            Some('\\') => {
                i += 1;
                continue;
            }
            Some(_) => {
                return Err(malformed(
                    line_no,
                    format!("unexpected line in hunk body: {line:?}"),
                ))
            }
        };
        match tag {
            LineTag::Context if old_left > 0 && new_left > 0 => {
                old_left -= 1;
                new_left -= 1;
            }
            LineTag::Added if new_left > 0 => new_left -= 1,
            LineTag::Removed if old_left > 0 => old_left -= 1,
            _ => {
                return Err(malformed(
                    line_no,
                    format!("{tag:?} line exceeds the counts in the hunk header"),
                ))
            }
        }
        hunk.lines.push(DiffLine {
            tag,
            text: text.to_string(),
        });
        i += 1;
    }
    if old_left > 0 || new_left > 0 {
        if old_left == new_left && old_left <= MAX_IMPLIED_BLANK_CONTEXT {
            for _ in 0..old_left {
                hunk.lines.push(DiffLine {
                    tag: LineTag::Context,
                    text: String::new(),
                });
            }
        } else {
            return Err(malformed(
                i,
                format!(
                    "hunk body shorter than header: {old_left} old and {new_left} new line(s) missing"
                ),
            ));
        }
    }
    // trailing "\ No newline at end of file"
    while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
        i += 1;
    }
    Ok(i)
}
