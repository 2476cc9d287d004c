//! Corpus loading, text normalization and whitespace tokenization.
//!
//! Every document's text is NFC-normalized once at load time. Tokens are
//! maximal runs of non-whitespace characters and carry byte offsets into the
//! normalized text, so any token span maps back to an exact source slice.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::{is_nfc_quick, IsNormalized, UnicodeNormalization};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// A whitespace-delimited token: byte range `[start, end)` in its source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn as_str(self, text: &str) -> &str {
        &text[self.start..self.end]
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Range(format!("empty or inverted span [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn len(self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(self) -> bool {
        self.end <= self.start
    }

    pub fn contains(self, other: TokenSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(self, other: TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    ParagraphBreak,
    HardBreak,
    Heading,
}

/// A structural boundary: a new unit (heading, paragraph, section) starts at
/// `token_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMarker {
    pub kind: BoundaryKind,
    pub token_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub source_path: String,
    pub text: String,
    pub structure_hints: Vec<BoundaryMarker>,
}

impl Document {
    /// Builds a document from raw text: normalizes it and extracts
    /// structural markers. Markdown rules apply when `source_path` ends in
    /// `.md` or `.markdown`.
    pub fn new(
        doc_id: impl Into<String>,
        source_path: impl Into<String>,
        raw_text: &str,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(Error::Contract("doc_id must be non-empty".into()));
        }
        let source_path = source_path.into();
        let text = normalize(raw_text);
        let markdown = is_markdown(&source_path);
        let structure_hints = extract_markers(&text, markdown);
        Ok(Self {
            doc_id,
            source_path,
            text,
            structure_hints,
        })
    }

    pub fn tokens(&self) -> Vec<Token> {
        tokenize(&self.text)
    }
}

fn is_markdown(path: &str) -> bool {
    let lower = path.to_ascii_lowercase();
    lower.ends_with(".md") || lower.ends_with(".markdown")
}

fn is_eligible(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("txt") | Some("md")
    )
}

/// NFC normalization. Already-normalized input is returned unchanged.
pub fn normalize(text: &str) -> String {
    match is_nfc_quick(text.chars()) {
        IsNormalized::Yes => text.to_owned(),
        _ => text.nfc().collect(),
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(Token { start: s, end: i });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            start: s,
            end: text.len(),
        });
    }
    tokens
}

/// Source slice covering `span`, including the whitespace between its tokens.
pub fn detokenize<'a>(text: &'a str, tokens: &[Token], span: TokenSpan) -> Result<&'a str> {
    if span.start >= span.end || span.end > tokens.len() {
        return Err(Error::Range(format!(
            "span [{}, {}) outside token range [0, {})",
            span.start,
            span.end,
            tokens.len()
        )));
    }
    Ok(&text[tokens[span.start].start..tokens[span.end - 1].end])
}

fn is_atx_heading(line: &str) -> bool {
    let trimmed = line.trim_start_matches(' ');
    if line.len() - trimmed.len() > 3 {
        return false;
    }
    let hashes = trimmed.bytes().take_while(|&b| b == b'#').count();
    (1..=6).contains(&hashes)
        && trimmed[hashes..]
            .chars()
            .next()
            .is_none_or(char::is_whitespace)
}

fn is_thematic_break(line: &str) -> bool {
    let compact: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
    compact.len() >= 3
        && matches!(compact[0], '-' | '*' | '_')
        && compact.iter().all(|&c| c == compact[0])
}

fn is_fence(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("```") || t.starts_with("~~~")
}

fn extract_markers(text: &str, markdown: bool) -> Vec<BoundaryMarker> {
    let tokens = tokenize(text);
    let mut markers: Vec<BoundaryMarker> = Vec::new();
    let mut next_token = 0usize;
    let mut line_start = 0usize;
    let mut prev_blank = false;
    let mut seen_content = false;
    let mut prev_heading = false;
    let mut in_code = false;

    for line in text.split_inclusive('\n') {
        let this_start = line_start;
        line_start += line.len();
        if line.trim().is_empty() {
            prev_blank = true;
            continue;
        }
        while next_token < tokens.len() && tokens[next_token].start < this_start {
            next_token += 1;
        }
        let offset = next_token;

        let kind = if markdown && is_fence(line) {
            let opening = !in_code;
            in_code = !in_code;
            (opening && prev_blank && seen_content).then_some(BoundaryKind::ParagraphBreak)
        } else if markdown && in_code {
            None
        } else if markdown && is_atx_heading(line) {
            Some(BoundaryKind::Heading)
        } else if markdown && seen_content && is_thematic_break(line) {
            Some(BoundaryKind::HardBreak)
        } else if prev_blank && seen_content && !prev_heading {
            Some(BoundaryKind::ParagraphBreak)
        } else {
            None
        };

        if let Some(kind) = kind {
            match markers.last_mut() {
                Some(last) if last.token_offset == offset => last.kind = last.kind.max(kind),
                _ => markers.push(BoundaryMarker {
                    kind,
                    token_offset: offset,
                }),
            }
        }
        prev_heading = kind == Some(BoundaryKind::Heading);
        prev_blank = false;
        seen_content = true;
    }
    markers
}

#[derive(Debug)]
pub struct IngestError {
    pub path: PathBuf,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub errors: Vec<IngestError>,
}

fn doc_id_for(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads every `.txt` / `.md` file under `root`. Unreadable files are
/// reported in [`Corpus::errors`] and skipped; documents come back sorted by
/// doc id.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }

    let mut paths = Vec::new();
    let mut errors = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        match entry {
            Ok(e) if e.file_type().is_file() && is_eligible(e.path()) => {
                paths.push(e.into_path())
            }
            Ok(_) => {}
            Err(e) => {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
                let source = e
                    .into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("directory walk failed"));
                errors.push(IngestError {
                    error: Error::io(&path, source),
                    path,
                });
            }
        }
    }

    let loaded: Vec<(PathBuf, Result<Document>)> = paths
        .into_par_iter()
        .map(|path| {
            let doc = std::fs::read(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|bytes| {
                    String::from_utf8(bytes).map_err(|e| {
                        Error::Contract(format!("{} is not valid UTF-8: {e}", path.display()))
                    })
                })
                .and_then(|raw| {
                    let id = doc_id_for(root, &path);
                    Document::new(id.clone(), id, &raw)
                });
            (path, doc)
        })
        .collect();

    let mut documents = Vec::with_capacity(loaded.len());
    for (path, doc) in loaded {
        match doc {
            Ok(d) => documents.push(d),
            Err(error) => errors.push(IngestError { path, error }),
        }
    }
    documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(Corpus { documents, errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs<'a>(text: &'a str, toks: &[Token]) -> Vec<&'a str> {
        toks.iter().map(|t| t.as_str(text)).collect()
    }

    #[test]
    fn tokenize_basics() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t ").is_empty());
        let t = "warranty claims  handled";
        assert_eq!(strs(t, &tokenize(t)), vec!["warranty", "claims", "handled"]);
    }

    #[test]
    fn tokenize_twenty_word_fixture() {
        // 20 words counted by hand, mixed punctuation and line breaks.
        let fixture = "The warranty covers parts and labour for two full years.\n\
                       Claims must be filed online, with a receipt,\tbefore expiry.";
        assert_eq!(tokenize(fixture).len(), 20);
    }

    #[test]
    fn detokenize_slices() {
        let t = "a b c d";
        let toks = tokenize(t);
        assert_eq!(detokenize(t, &toks, TokenSpan { start: 1, end: 3 }).unwrap(), "b c");
        assert_eq!(detokenize(t, &toks, TokenSpan { start: 0, end: 4 }).unwrap(), t);
        assert!(matches!(
            detokenize(t, &toks, TokenSpan { start: 0, end: 0 }),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            detokenize(t, &toks, TokenSpan { start: 2, end: 5 }),
            Err(Error::Range(_))
        ));
        assert!(TokenSpan::new(0, 0).is_err());
    }

    #[test]
    fn detokenize_preserves_inner_whitespace() {
        let t = "  one\n\ntwo   three \t";
        let toks = tokenize(t);
        assert_eq!(detokenize(t, &toks, TokenSpan { start: 0, end: 3 }).unwrap(), t.trim());
    }

    #[test]
    fn normalization_is_nfc() {
        let decomposed = "cafe\u{301}";
        let doc = Document::new("x.txt", "x.txt", decomposed).unwrap();
        assert_eq!(doc.text, "caf\u{e9}");
        assert_eq!(normalize("plain"), "plain");
    }

    #[test]
    fn markdown_headings_at_hand_counted_offsets() {
        // "## Intro" = 2 tokens, then 208 words => second heading at 210.
        let body: Vec<String> = (0..208).map(|i| format!("w{i}")).collect();
        let text = format!("## Intro\n\n{}\n\n## Next\n\nmore text here\n", body.join(" "));
        let doc = Document::new("d.md", "d.md", &text).unwrap();
        let headings: Vec<usize> = doc
            .structure_hints
            .iter()
            .filter(|m| m.kind == BoundaryKind::Heading)
            .map(|m| m.token_offset)
            .collect();
        assert_eq!(headings, vec![0, 210]);
        // a heading's first paragraph stays attached to the heading
        assert_eq!(doc.structure_hints.len(), 2);
    }

    #[test]
    fn plain_text_ignores_hashes_but_splits_paragraphs() {
        let doc = Document::new("d.txt", "d.txt", "# not heading\nline\n\nsecond para").unwrap();
        assert_eq!(
            doc.structure_hints,
            vec![BoundaryMarker {
                kind: BoundaryKind::ParagraphBreak,
                token_offset: 4
            }]
        );
    }

    #[test]
    fn code_fences_suppress_headings() {
        let text = "intro words\n\n```\n# comment\n\nx\n```\n\nafter";
        let doc = Document::new("d.md", "d.md", text).unwrap();
        assert!(doc.structure_hints.iter().all(|m| m.kind != BoundaryKind::Heading));
        let offsets: Vec<usize> = doc.structure_hints.iter().map(|m| m.token_offset).collect();
        assert_eq!(offsets, vec![2, 7]);
    }

    #[test]
    fn heading_wins_over_paragraph_break() {
        let doc = Document::new("d.md", "d.md", "a b\n\n# H\ntext\n\n---\nrest").unwrap();
        assert_eq!(
            doc.structure_hints,
            vec![
                BoundaryMarker { kind: BoundaryKind::Heading, token_offset: 2 },
                BoundaryMarker { kind: BoundaryKind::HardBreak, token_offset: 5 },
            ]
        );
    }

    #[test]
    fn empty_doc_id_rejected() {
        assert!(Document::new("", "", "x").is_err());
    }

    #[test]
    fn load_corpus_ordering_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).unwrap().documents.is_empty());

        std::fs::write(dir.path().join("b.txt"), "bee").unwrap();
        std::fs::write(dir.path().join("a.txt"), "ay").unwrap();
        std::fs::write(dir.path().join("skip.pdf"), "nope").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/c.md"), "# c").unwrap();
        std::fs::write(dir.path().join("bad.txt"), [0xff, 0xfe, 0x00]).unwrap();

        let corpus = load_corpus(dir.path()).unwrap();
        let ids: Vec<&str> = corpus.documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a.txt", "b.txt", "sub/c.md"]);
        assert_eq!(corpus.errors.len(), 1);
        assert!(corpus.errors[0].path.ends_with("bad.txt"));

        let again = load_corpus(dir.path()).unwrap();
        assert_eq!(again.documents, corpus.documents);
    }

    #[test]
    fn load_corpus_missing_root_errors() {
        assert!(load_corpus(Path::new("/definitely/not/here")).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_full_span(words in proptest::collection::vec("[a-zA-Z0-9.,é]{1,8}", 1..40),
                                    seps in proptest::collection::vec("[ \t\n]{1,3}", 40)) {
                let mut text = String::new();
                for (i, w) in words.iter().enumerate() {
                    if i > 0 { text.push_str(&seps[i]); }
                    text.push_str(w);
                }
                let text = normalize(&text);
                let toks = tokenize(&text);
                prop_assert_eq!(toks.len(), words.len());
                let full = TokenSpan::new(0, toks.len()).unwrap();
                prop_assert_eq!(detokenize(&text, &toks, full).unwrap(), text.as_str());
            }

            #[test]
            fn markers_strictly_increase(text in "([a-z#-]{0,4}[ \n]{1,3}){0,60}") {
                for md in [false, true] {
                    let n = tokenize(&text).len();
                    let markers = extract_markers(&text, md);
                    for pair in markers.windows(2) {
                        prop_assert!(pair[0].token_offset < pair[1].token_offset);
                    }
                    for m in &markers {
                        prop_assert!(m.token_offset <= n);
                    }
                }
            }
        }
    }
}
