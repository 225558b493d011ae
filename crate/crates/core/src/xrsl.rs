//! The extended resource specification language in which every job
//! request and job-control message is written.
//!
//! Grammar:
//!
//! ```text
//! document := "&" relation+
//! relation := "(" name "=" values ")"
//! values   := scalar | tuple+
//! tuple    := "(" scalar+ ")"
//! scalar   := bare-token | quoted-string with \" and \\ escapes
//! ```
//!
//! Whitespace between tokens is ignored and attribute names are folded to
//! lowercase. The attribute set is fixed and closed: unknown attributes
//! are rejected rather than carried along, which surfaces typos at parse
//! time. [`serialize`] emits the canonical form — attributes sorted,
//! every scalar double-quoted, a single space between tuples and no other
//! whitespace — which is also the on-the-wire body of SUBMIT requests.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum XrslError {
    /// Byte offsets are 1-based: the first byte of the document is 1.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationValue {
    Scalar(String),
    Tuples(Vec<Vec<String>>),
}

/// A parsed document: an ordered list of attribute relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct XrslDocument {
    pub relations: Vec<(String, RelationValue)>,
}

impl XrslDocument {
    pub fn get(&self, attribute: &str) -> Option<&RelationValue> {
        self.relations
            .iter()
            .find(|(a, _)| a == attribute)
            .map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Action {
    #[default]
    Submit,
    Cancel,
    Clean,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Submit => "submit",
            Action::Cancel => "cancel",
            Action::Clean => "clean",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A declared input or output file. For inputs an empty `url` means the
/// user uploads the file; for outputs it means the file is retained in
/// the session directory for download.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileSpec {
    pub name: String,
    pub url: String,
}

impl FileSpec {
    pub fn new(name: impl Into<String>, url: impl Into<String>) -> Self {
        FileSpec {
            name: name.into(),
            url: url.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JobDescription {
    pub executable: String,
    pub arguments: Vec<String>,
    pub inputfiles: Vec<FileSpec>,
    pub outputfiles: Vec<FileSpec>,
    /// Wall-clock seconds; 0 = unspecified.
    pub cputime_s: u64,
    pub memory_mb: u64,
    pub disk_mb: u64,
    pub runtime_environments: BTreeSet<String>,
    pub queue: String,
    pub stdout: String,
    pub stderr: String,
    pub jobname: String,
    pub notify: String,
    /// Session retention after the job reaches a terminal state;
    /// 0 = server default.
    pub lifetime_s: u64,
    pub action: Action,
}

impl JobDescription {
    pub fn validate(&self) -> Result<(), XrslError> {
        if self.action == Action::Submit && self.executable.is_empty() {
            return Err(XrslError::Invalid("executable required".into()));
        }
        if self.action != Action::Submit
            && (!self.inputfiles.is_empty() || !self.outputfiles.is_empty())
        {
            return Err(XrslError::Invalid(format!(
                "{} request cannot carry staging attributes",
                self.action
            )));
        }
        for (kind, files) in [
            ("inputfiles", &self.inputfiles),
            ("outputfiles", &self.outputfiles),
        ] {
            let mut seen = BTreeSet::new();
            for f in files.iter() {
                if f.name.is_empty() {
                    return Err(XrslError::Invalid(format!("{kind}: empty file name")));
                }
                if !seen.insert(&f.name) {
                    return Err(XrslError::Invalid(format!(
                        "{kind}: duplicate file name {:?}",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, XrslError> {
        Err(XrslError::Parse {
            offset: self.pos + 1,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<(), XrslError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {:?}", b as char))
        }
    }

    fn scalar(&mut self) -> Result<String, XrslError> {
        if self.peek() == Some(b'"') {
            self.pos += 1;
            let mut out = Vec::new();
            loop {
                match self.peek() {
                    Some(b'"') => {
                        self.pos += 1;
                        let s = String::from_utf8(out).map_err(|_| XrslError::Parse {
                            offset: self.pos,
                            message: "string is not UTF-8".into(),
                        })?;
                        return Ok(s);
                    }
                    Some(b'\\') => {
                        self.pos += 1;
                        match self.peek() {
                            Some(c @ (b'"' | b'\\')) => {
                                out.push(c);
                                self.pos += 1;
                            }
                            Some(c) => return self.err(format!("invalid escape \\{}", c as char)),
                            None => return self.err("unterminated string"),
                        }
                    }
                    Some(c) => {
                        out.push(c);
                        self.pos += 1;
                    }
                    None => return self.err("unterminated string"),
                }
            }
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() || matches!(c, b'(' | b')' | b'=' | b'"' | b'&') {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected a value");
        }
        String::from_utf8(self.bytes[start..self.pos].to_vec()).map_err(|_| XrslError::Parse {
            offset: start + 1,
            message: "token is not UTF-8".into(),
        })
    }

    fn relation(&mut self) -> Result<(String, RelationValue), XrslError> {
        self.expect(b'(')?;
        self.skip_ws();
        let name = self.scalar()?.to_lowercase();
        self.skip_ws();
        self.expect(b'=')?;
        self.skip_ws();
        let value = if self.peek() == Some(b'(') {
            let mut tuples = Vec::new();
            while self.peek() == Some(b'(') {
                self.pos += 1;
                self.skip_ws();
                let mut tuple = Vec::new();
                while self.peek() != Some(b')') {
                    tuple.push(self.scalar()?);
                    self.skip_ws();
                }
                self.expect(b')')?;
                if tuple.is_empty() {
                    return self.err("empty tuple");
                }
                tuples.push(tuple);
                self.skip_ws();
            }
            RelationValue::Tuples(tuples)
        } else {
            RelationValue::Scalar(self.scalar()?)
        };
        self.skip_ws();
        self.expect(b')')?;
        Ok((name, value))
    }
}

pub fn parse(text: &str) -> Result<XrslDocument, XrslError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    p.expect(b'&')?;
    let mut relations = Vec::new();
    loop {
        p.skip_ws();
        match p.peek() {
            Some(b'(') => relations.push(p.relation()?),
            Some(_) => return p.err("expected '(' or end of document"),
            None => break,
        }
    }
    if relations.is_empty() {
        return p.err("empty document");
    }
    Ok(XrslDocument { relations })
}

const KNOWN_ATTRIBUTES: [&str; 15] = [
    "action",
    "arguments",
    "cputime",
    "disk",
    "executable",
    "inputfiles",
    "jobname",
    "lifetime",
    "memory",
    "notify",
    "outputfiles",
    "queue",
    "runtimeenvironment",
    "stderr",
    "stdout",
];

fn want_scalar(attr: &str, value: &RelationValue) -> Result<String, XrslError> {
    match value {
        RelationValue::Scalar(s) => Ok(s.clone()),
        RelationValue::Tuples(_) => Err(XrslError::Invalid(format!(
            "{attr}: expected a single value"
        ))),
    }
}

fn want_integer(attr: &str, value: &RelationValue) -> Result<u64, XrslError> {
    want_scalar(attr, value)?
        .parse::<u64>()
        .map_err(|_| XrslError::Invalid(format!("{attr}: not an integer")))
}

fn want_string_list(attr: &str, value: &RelationValue) -> Result<Vec<String>, XrslError> {
    match value {
        RelationValue::Scalar(s) => Ok(vec![s.clone()]),
        RelationValue::Tuples(tuples) => {
            if tuples.len() != 1 {
                return Err(XrslError::Invalid(format!(
                    "{attr}: expected a single tuple of values"
                )));
            }
            Ok(tuples[0].clone())
        }
    }
}

fn want_files(attr: &str, value: &RelationValue) -> Result<Vec<FileSpec>, XrslError> {
    let tuples = match value {
        RelationValue::Tuples(t) => t,
        RelationValue::Scalar(_) => {
            return Err(XrslError::Invalid(format!(
                "{attr}: expected (name url) tuples"
            )))
        }
    };
    tuples
        .iter()
        .map(|t| match t.as_slice() {
            [name] => Ok(FileSpec::new(name.clone(), "")),
            [name, url] => Ok(FileSpec::new(name.clone(), url.clone())),
            _ => Err(XrslError::Invalid(format!(
                "{attr}: tuple must be (name) or (name url)"
            ))),
        })
        .collect()
}

/// Maps a parsed document onto a [`JobDescription`], strictly: unknown
/// and duplicate attributes are errors.
pub fn to_job(doc: &XrslDocument) -> Result<JobDescription, XrslError> {
    let mut job = JobDescription::default();
    let mut seen = BTreeSet::new();
    for (attr, value) in &doc.relations {
        if !KNOWN_ATTRIBUTES.contains(&attr.as_str()) {
            return Err(XrslError::Invalid(format!("unknown attribute: {attr}")));
        }
        if !seen.insert(attr.clone()) {
            return Err(XrslError::Invalid(format!("duplicate attribute: {attr}")));
        }
        match attr.as_str() {
            "executable" => job.executable = want_scalar(attr, value)?,
            "arguments" => job.arguments = want_string_list(attr, value)?,
            "inputfiles" => job.inputfiles = want_files(attr, value)?,
            "outputfiles" => job.outputfiles = want_files(attr, value)?,
            "cputime" => job.cputime_s = want_integer(attr, value)?,
            "memory" => job.memory_mb = want_integer(attr, value)?,
            "disk" => job.disk_mb = want_integer(attr, value)?,
            "lifetime" => job.lifetime_s = want_integer(attr, value)?,
            "runtimeenvironment" => {
                job.runtime_environments = want_string_list(attr, value)?.into_iter().collect()
            }
            "queue" => job.queue = want_scalar(attr, value)?,
            "stdout" => job.stdout = want_scalar(attr, value)?,
            "stderr" => job.stderr = want_scalar(attr, value)?,
            "jobname" => job.jobname = want_scalar(attr, value)?,
            "notify" => job.notify = want_scalar(attr, value)?,
            "action" => {
                job.action = match want_scalar(attr, value)?.as_str() {
                    "submit" => Action::Submit,
                    "cancel" => Action::Cancel,
                    "clean" => Action::Clean,
                    other => {
                        return Err(XrslError::Invalid(format!(
                            "action: unknown value {other:?}"
                        )))
                    }
                }
            }
            _ => unreachable!("attribute list is closed"),
        }
    }
    job.validate()?;
    Ok(job)
}

pub fn parse_job(text: &str) -> Result<JobDescription, XrslError> {
    to_job(&parse(text)?)
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn tuple_text(values: &[&str]) -> String {
    let quoted: Vec<String> = values.iter().map(|v| quote(v)).collect();
    format!("({})", quoted.join(" "))
}

fn files_text(files: &[FileSpec]) -> String {
    files
        .iter()
        .map(|f| {
            if f.url.is_empty() {
                tuple_text(&[&f.name])
            } else {
                tuple_text(&[&f.name, &f.url])
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical text for a job description: attributes sorted, all scalars
/// quoted, a single space between tuples, nothing else. Unset fields are
/// omitted; `to_job(parse(serialize(j)))` gives back `j`.
pub fn serialize(job: &JobDescription) -> String {
    let mut relations: Vec<(&str, String)> = Vec::new();
    if job.action != Action::Submit {
        relations.push(("action", quote(job.action.as_str())));
    }
    if !job.arguments.is_empty() {
        let refs: Vec<&str> = job.arguments.iter().map(String::as_str).collect();
        relations.push(("arguments", tuple_text(&refs)));
    }
    if job.cputime_s > 0 {
        relations.push(("cputime", quote(&job.cputime_s.to_string())));
    }
    if job.disk_mb > 0 {
        relations.push(("disk", quote(&job.disk_mb.to_string())));
    }
    if !job.executable.is_empty() {
        relations.push(("executable", quote(&job.executable)));
    }
    if !job.inputfiles.is_empty() {
        relations.push(("inputfiles", files_text(&job.inputfiles)));
    }
    if !job.jobname.is_empty() {
        relations.push(("jobname", quote(&job.jobname)));
    }
    if job.lifetime_s > 0 {
        relations.push(("lifetime", quote(&job.lifetime_s.to_string())));
    }
    if job.memory_mb > 0 {
        relations.push(("memory", quote(&job.memory_mb.to_string())));
    }
    if !job.notify.is_empty() {
        relations.push(("notify", quote(&job.notify)));
    }
    if !job.outputfiles.is_empty() {
        relations.push(("outputfiles", files_text(&job.outputfiles)));
    }
    if !job.queue.is_empty() {
        relations.push(("queue", quote(&job.queue)));
    }
    if !job.runtime_environments.is_empty() {
        let refs: Vec<&str> = job
            .runtime_environments
            .iter()
            .map(String::as_str)
            .collect();
        relations.push(("runtimeenvironment", tuple_text(&refs)));
    }
    if !job.stderr.is_empty() {
        relations.push(("stderr", quote(&job.stderr)));
    }
    if !job.stdout.is_empty() {
        relations.push(("stdout", quote(&job.stdout)));
    }
    let mut out = String::from("&");
    for (name, value) in relations {
        out.push('(');
        out.push_str(name);
        out.push('=');
        out.push_str(&value);
        out.push(')');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_two_scalar_relations() {
        let doc = parse(r#"&(executable="run.sh")(cputime=60)"#).unwrap();
        assert_eq!(
            doc.relations,
            vec![
                (
                    "executable".to_string(),
                    RelationValue::Scalar("run.sh".to_string())
                ),
                (
                    "cputime".to_string(),
                    RelationValue::Scalar("60".to_string())
                ),
            ]
        );
    }

    #[test]
    fn parse_one_two_tuple() {
        let doc = parse(r#"&(inputfiles=("data.in" "ngse://se1:39100/d/data.in"))"#).unwrap();
        assert_eq!(doc.relations.len(), 1);
        assert_eq!(
            doc.relations[0].1,
            RelationValue::Tuples(vec![vec![
                "data.in".to_string(),
                "ngse://se1:39100/d/data.in".to_string()
            ]])
        );
    }

    #[test]
    fn unclosed_relation_reports_byte_offset() {
        // The document is 16 bytes; the missing ')' is at 1-based byte 17.
        let err = parse(r#"&(executable="a""#).unwrap_err();
        assert_eq!(
            err,
            XrslError::Parse {
                offset: 17,
                message: "expected ')'".to_string()
            }
        );
    }

    #[test]
    fn empty_document_is_an_error() {
        assert!(matches!(parse("&"), Err(XrslError::Parse { .. })));
        assert!(matches!(parse(""), Err(XrslError::Parse { .. })));
        assert!(matches!(parse("   "), Err(XrslError::Parse { .. })));
    }

    #[test]
    fn unterminated_string_is_an_error() {
        let err = parse(r#"&(executable="a"#).unwrap_err();
        assert!(matches!(err, XrslError::Parse { .. }));
    }

    #[test]
    fn attribute_names_fold_to_lowercase() {
        let doc = parse(r#"&(ExEcUtAbLe="a")"#).unwrap();
        assert_eq!(doc.relations[0].0, "executable");
    }

    #[test]
    fn whitespace_between_tokens_is_ignored() {
        let doc = parse("&\n ( executable = \"a\" )\n (cputime = 60 )").unwrap();
        assert_eq!(doc.relations.len(), 2);
    }

    #[test]
    fn to_job_maps_known_attributes() {
        let job = parse_job(r#"&(executable="run.sh")(cputime=60)"#).unwrap();
        assert_eq!(
            job,
            JobDescription {
                executable: "run.sh".to_string(),
                cputime_s: 60,
                ..Default::default()
            }
        );
    }

    #[test]
    fn action_cancel_document() {
        let job = parse_job(r#"&(action="cancel")"#).unwrap();
        assert_eq!(job.action, Action::Cancel);
        assert!(job.executable.is_empty());
    }

    #[test]
    fn non_integer_cputime_is_rejected() {
        let err = parse_job(r#"&(executable="a")(cputime="many")"#).unwrap_err();
        assert_eq!(
            err,
            XrslError::Invalid("cputime: not an integer".to_string())
        );
    }

    #[test]
    fn unknown_attribute_is_rejected() {
        let err = parse_job(r#"&(executable="a")(grammyaward="yes")"#).unwrap_err();
        assert!(matches!(err, XrslError::Invalid(m) if m.contains("unknown attribute")));
    }

    #[test]
    fn duplicate_attribute_is_rejected() {
        let err = parse_job(r#"&(executable="a")(executable="b")"#).unwrap_err();
        assert!(matches!(err, XrslError::Invalid(m) if m.contains("duplicate")));
    }

    #[test]
    fn cancel_with_staging_attributes_is_rejected() {
        let err = parse_job(r#"&(action="cancel")(inputfiles=("x" "u"))"#).unwrap_err();
        assert!(matches!(err, XrslError::Invalid(m) if m.contains("staging")));
    }

    #[test]
    fn duplicate_input_names_are_rejected() {
        let err = parse_job(r#"&(executable="a")(inputfiles=("x" "u1") ("x" "u2"))"#).unwrap_err();
        assert!(matches!(err, XrslError::Invalid(m) if m.contains("duplicate file name")));
    }

    #[test]
    fn serialize_sorts_and_quotes() {
        let job = JobDescription {
            executable: "a".to_string(),
            cputime_s: 60,
            ..Default::default()
        };
        assert_eq!(serialize(&job), r#"&(cputime="60")(executable="a")"#);
    }

    #[test]
    fn serialize_omits_unset_fields() {
        let job = JobDescription {
            executable: "x".to_string(),
            ..Default::default()
        };
        assert_eq!(serialize(&job), r#"&(executable="x")"#);
    }

    #[test]
    fn serialize_escapes_quotes_and_backslashes() {
        let job = JobDescription {
            executable: r#"we"ird\name"#.to_string(),
            ..Default::default()
        };
        let text = serialize(&job);
        assert_eq!(parse_job(&text).unwrap(), job);
    }

    #[test]
    fn empty_source_round_trips_as_one_element_tuple() {
        let job = JobDescription {
            executable: "a".to_string(),
            inputfiles: vec![FileSpec::new("up.dat", "")],
            ..Default::default()
        };
        let text = serialize(&job);
        assert_eq!(text, r#"&(executable="a")(inputfiles=("up.dat"))"#);
        assert_eq!(parse_job(&text).unwrap(), job);
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9._/-]{1,12}"
    }

    fn url_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            "ngse://[a-z0-9]{1,8}:39100/[a-z0-9/]{1,10}",
            "rc:[a-z0-9]{1,10}",
        ]
    }

    fn files_strategy() -> impl Strategy<Value = Vec<FileSpec>> {
        proptest::collection::btree_map(name_strategy(), url_strategy(), 0..4).prop_map(|m| {
            m.into_iter()
                .map(|(name, url)| FileSpec { name, url })
                .collect()
        })
    }

    prop_compose! {
        fn job_strategy()(
            executable in "[a-zA-Z0-9./_-]{1,12}",
            arguments in proptest::collection::vec("[a-zA-Z0-9 ._=:-]{0,10}", 0..4),
            inputfiles in files_strategy(),
            outputfiles in files_strategy(),
            cputime_s in 0u64..100_000,
            memory_mb in 0u64..100_000,
            disk_mb in 0u64..100_000,
            rtes in proptest::collection::btree_set("[A-Z/0-9.-]{1,10}", 0..3),
            queue in prop_oneof![Just(String::new()), "[a-z]{1,8}"],
            stdout in prop_oneof![Just(String::new()), "[a-z.]{1,8}"],
            notify in prop_oneof![Just(String::new()), "[a-z]{1,6}@[a-z]{1,6}"],
            lifetime_s in 0u64..10_000,
        ) -> JobDescription {
            JobDescription {
                executable,
                arguments,
                inputfiles,
                outputfiles,
                cputime_s,
                memory_mb,
                disk_mb,
                runtime_environments: rtes,
                queue,
                stdout,
                stderr: String::new(),
                jobname: String::new(),
                notify,
                lifetime_s,
                action: Action::Submit,
            }
        }
    }

    proptest! {
        #[test]
        fn job_round_trips_through_canonical_form(job in job_strategy()) {
            let text = serialize(&job);
            let back = parse_job(&text).unwrap();
            prop_assert_eq!(back, job);
        }

        #[test]
        fn canonical_form_is_idempotent(job in job_strategy()) {
            let once = serialize(&job);
            let twice = serialize(&parse_job(&once).unwrap());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn parser_is_total_on_arbitrary_strings(text in "\\PC{0,80}") {
            let _ = parse(&text);
        }

        #[test]
        fn parser_is_total_on_truncations(job in job_strategy(), cut in 0usize..200) {
            let text = serialize(&job);
            if cut < text.len() && text.is_char_boundary(cut) {
                let _ = parse(&text[..cut]);
            }
        }
    }
}
