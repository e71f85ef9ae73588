//! Dataset manifests and utterance loading.
//!
//! One record per line: `id<TAB>feature_path<TAB>visual_path|-<TAB>transcript`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adaptation::AdaptScheme;
use crate::error::{Error, Result};
use crate::features::{load_visual, FeatureSequence, VisualContext};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub visual_path: Option<PathBuf>,
    pub transcript: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses manifest text. `base` resolves relative paths.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let vocab = Vocabulary::standard();
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(Error::Validation(format!(
                    "manifest line {line}: expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if id.is_empty() {
                return Err(Error::Validation(format!(
                    "manifest line {line}: empty utterance id"
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId { id, line });
            }
            let transcript = fields[3].to_string();
            if let Err(ch) = vocab.encode(&transcript) {
                return Err(Error::UnknownCharacter { id, ch, line });
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let visual_path = match fields[2] {
                "-" | "" => None,
                p => Some(resolve(p)),
            };
            entries.push(ManifestEntry {
                feature_path: resolve(fields[1]),
                visual_path,
                transcript,
                id,
            });
        }
        Ok(Self { entries })
    }

    /// Writes the manifest, storing paths relative to `base` when possible.
    pub fn to_string_relative(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for e in &self.entries {
            let visual = e
                .visual_path
                .as_deref()
                .map_or_else(|| "-".to_string(), rel);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.id,
                rel(&e.feature_path),
                visual,
                e.transcript
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_string_relative(base)).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Utterance with its log-mel frames, optional visual vector and token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: FeatureSequence,
    pub visual: Option<VisualContext>,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn transcript(&self) -> String {
        Vocabulary::standard().decode(&self.tokens)
    }
}

/// Loads every entry of a manifest. When `adapt` uses the visual channel,
/// a missing visual path is a hard error.
pub fn load_utterances(manifest: &Manifest, adapt: AdaptScheme) -> Result<Vec<Utterance>> {
    let vocab = Vocabulary::standard();
    manifest
        .entries
        .iter()
        .map(|e| {
            let visual = match (&e.visual_path, adapt.uses_visual()) {
                (Some(p), _) => Some(load_visual(p)?),
                (None, true) => {
                    return Err(Error::Validation(format!(
                        "utterance `{}` has no visual vector but adaptation `{adapt}` needs one",
                        e.id
                    )))
                }
                (None, false) => None,
            };
            Ok(Utterance {
                id: e.id.clone(),
                audio: FeatureSequence::read(&e.feature_path)?,
                visual,
                tokens: vocab
                    .encode(&e.transcript)
                    .expect("validated at parse time"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_rows() {
        let text = "a\tf/a.fea\tv/a.vis\thello world\nb\t/abs/b.fea\t-\tx\n\nc\tc.fea\t-\t\n";
        let m = Manifest::parse_str(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].feature_path, PathBuf::from("/data/f/a.fea"));
        assert_eq!(
            m.entries[0].visual_path,
            Some(PathBuf::from("/data/v/a.vis"))
        );
        assert_eq!(m.entries[1].feature_path, PathBuf::from("/abs/b.fea"));
        assert_eq!(m.entries[1].visual_path, None);
        assert_eq!(m.entries[2].transcript, "");
    }

    #[test]
    fn unknown_character_reports_location() {
        let text = "a\tx.fea\t-\tok\nb\tx.fea\t-\tmail@home\n";
        match Manifest::parse_str(text, Path::new(".")) {
            Err(Error::UnknownCharacter { id, ch, line }) => {
                assert_eq!((id.as_str(), ch, line), ("b", '@', 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "a\tx.fea\t-\tok\na\ty.fea\t-\tok\n";
        assert!(matches!(
            Manifest::parse_str(text, Path::new(".")),
            Err(Error::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn missing_fields_rejected() {
        assert!(Manifest::parse_str("a\tx.fea\tok\n", Path::new(".")).is_err());
    }

    #[test]
    fn relative_round_trip() {
        let text = "a\tf/a.fea\tv/a.vis\thello\nb\tb.fea\t-\tx y\n";
        let base = Path::new("/data/set");
        let m = Manifest::parse_str(text, base).unwrap();
        assert_eq!(m.to_string_relative(base), text);
    }

    #[test]
    fn missing_visual_is_error_when_adapting() {
        let dir = tempfile::tempdir().unwrap();
        let fs = FeatureSequence::new(vec![0.5; 40 * 3], 40, 10).unwrap();
        fs.write(&dir.path().join("a.fea")).unwrap();
        let m = Manifest::parse_str("a\ta.fea\t-\tab\n", dir.path()).unwrap();
        assert!(matches!(
            load_utterances(&m, AdaptScheme::Vat),
            Err(Error::Validation(_))
        ));
        let u = load_utterances(&m, AdaptScheme::None).unwrap();
        assert_eq!(u[0].tokens, vec![0, 1]);
        assert_eq!(u[0].audio, fs);
    }
}
