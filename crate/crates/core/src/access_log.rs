//! Combined-format access log parsing and cleaning.
//!
//! A log line is whitespace-separated except that `[...]` (timestamps)
//! and `"..."` (request strings) group into single tokens. Which token
//! holds which retained field is described by a [`LogSchema`], so logs
//! with extra or reordered fields can be ingested without code changes.

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    Post,
    Head,
    Put,
    Delete,
    Other,
}

impl HttpMethod {
    fn parse(token: &str) -> Self {
        match token {
            "GET" => Self::Get,
            "POST" => Self::Post,
            "HEAD" => Self::Head,
            "PUT" => Self::Put,
            "DELETE" => Self::Delete,
            _ => Self::Other,
        }
    }
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Get => "GET",
            Self::Post => "POST",
            Self::Head => "HEAD",
            Self::Put => "PUT",
            Self::Delete => "DELETE",
            Self::Other => "OTHER",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceType {
    Static,
    LiveStreaming,
    ProgressiveDownload,
    Other,
}

impl ServiceType {
    pub fn parse(token: &str) -> Self {
        match token {
            "static" => Self::Static,
            "live_streaming" | "live" => Self::LiveStreaming,
            "progressive_download" | "pd" => Self::ProgressiveDownload,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::LiveStreaming => "live_streaming",
            Self::ProgressiveDownload => "progressive_download",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentType {
    Image,
    Video,
    Audio,
    Text,
    Other,
}

impl ContentType {
    pub fn parse(token: &str) -> Self {
        match token {
            "image" => Self::Image,
            "video" => Self::Video,
            "audio" => Self::Audio,
            "text" => Self::Text,
            _ => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Video => "video",
            Self::Audio => "audio",
            Self::Text => "text",
            Self::Other => "other",
        }
    }
}

/// One sanitized request with the twelve retained fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub ip: String,
    /// Epoch seconds, UTC. Zone offsets in the raw line are folded in.
    pub timestamp: i64,
    pub http_method: HttpMethod,
    pub status_code: u16,
    pub bytes: u64,
    pub delivery_time_ms: u64,
    pub service_type: ServiceType,
    pub cache_hit: bool,
    pub node: String,
    pub account_offering: String,
    pub content_url: String,
    pub content_type: ContentType,
}

impl CleanRecord {
    pub fn is_error(&self) -> bool {
        self.status_code >= 400
    }
}

/// Token position of each retained field. `None` means the log format
/// does not carry the field; such fields get neutral defaults and are
/// not counted as empty. The quoted request token supplies both the
/// HTTP method and the content URL.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSchema {
    pub ip: usize,
    pub timestamp: usize,
    pub request: usize,
    pub status_code: usize,
    pub bytes: Option<usize>,
    pub delivery_time_ms: Option<usize>,
    pub service_type: Option<usize>,
    pub cache_hit: Option<usize>,
    pub node: Option<usize>,
    pub account_offering: Option<usize>,
    pub content_type: Option<usize>,
}

impl Default for LogSchema {
    /// Matches the lines emitted by the synthetic generator:
    /// `ip - - [ts] "req" status bytes delivery service hit node ao ctype`.
    fn default() -> Self {
        Self {
            ip: 0,
            timestamp: 3,
            request: 4,
            status_code: 5,
            bytes: Some(6),
            delivery_time_ms: Some(7),
            service_type: Some(8),
            cache_hit: Some(9),
            node: Some(10),
            account_offering: Some(11),
            content_type: Some(12),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("bad timestamp in field {0}: {1}")]
    BadTimestamp(usize, String),
    #[error("bad integer for {field}: {token}")]
    BadInteger { field: &'static str, token: String },
}

/// Parse output: the record plus how many declared fields were empty
/// (`-` or blank), which the cleaning pass thresholds on.
#[derive(Debug, Clone)]
pub struct ParsedLine {
    pub record: CleanRecord,
    pub empty_fields: usize,
}

fn is_empty_token(tok: &str) -> bool {
    tok.is_empty() || tok == "-"
}

/// Splits a line into tokens, treating `[...]` and `"..."` as single
/// tokens with the delimiters stripped.
fn tokenize(line: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b' ' | b'\t' => i += 1,
            b'[' => {
                let start = i + 1;
                let end = line[start..].find(']').map(|p| start + p).unwrap_or(bytes.len());
                tokens.push(&line[start..end]);
                i = end + 1;
            }
            b'"' => {
                let start = i + 1;
                let end = line[start..].find('"').map(|p| start + p).unwrap_or(bytes.len());
                tokens.push(&line[start..end]);
                i = end + 1;
            }
            _ => {
                let start = i;
                while i < bytes.len() && bytes[i] != b' ' && bytes[i] != b'\t' {
                    i += 1;
                }
                tokens.push(&line[start..i]);
            }
        }
    }
    tokens
}

const MONTHS: [&str; 12] = [
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];

/// Parses `dd/mmm/yyyy:hh:mm:ss -zzzz` into epoch seconds UTC. The zone
/// field is read as a signed `HHMM` pair without a range check; real
/// logs occasionally carry sloppy offsets and the subtraction is still
/// well defined.
fn parse_clf_timestamp(tok: &str, pos: usize) -> Result<i64, ParseError> {
    let bad = || ParseError::BadTimestamp(pos, tok.to_string());
    let (dt_part, zone_part) = match tok.split_once(' ') {
        Some((d, z)) => (d, Some(z)),
        None => (tok, None),
    };
    let mut pieces = dt_part.splitn(2, ':');
    let date = pieces.next().ok_or_else(bad)?;
    let time = pieces.next().ok_or_else(bad)?;

    let mut dmy = date.split('/');
    let day: u32 = dmy.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let mon_name = dmy.next().ok_or_else(bad)?;
    let year: i32 = dmy.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let month = MONTHS
        .iter()
        .position(|m| m.eq_ignore_ascii_case(mon_name))
        .ok_or_else(bad)? as u32
        + 1;

    let mut hms = time.split(':');
    let hour: u32 = hms.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let min: u32 = hms.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let sec: u32 = hms.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;

    let naive: NaiveDateTime = NaiveDate::from_ymd_opt(year, month, day)
        .and_then(|d| d.and_hms_opt(hour, min, sec))
        .ok_or_else(bad)?;
    let mut epoch = naive.and_utc().timestamp();

    if let Some(zone) = zone_part {
        let (sign, digits) = match zone.as_bytes().first() {
            Some(b'+') => (1i64, &zone[1..]),
            Some(b'-') => (-1i64, &zone[1..]),
            _ => (1i64, zone),
        };
        if digits.len() != 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let hh: i64 = digits[..2].parse().map_err(|_| bad())?;
        let mm: i64 = digits[2..].parse().map_err(|_| bad())?;
        epoch -= sign * (hh * 3600 + mm * 60);
    }
    Ok(epoch)
}

fn required<'a>(tokens: &[&'a str], pos: usize, what: &str) -> Result<&'a str, ParseError> {
    tokens
        .get(pos)
        .copied()
        .ok_or_else(|| ParseError::MalformedLine(format!("missing {what} at field {pos}")))
}

/// Parses one line against a schema. Optional fields that are present
/// but empty (`-`) take neutral defaults and bump the empty count.
pub fn parse_log_line(line: &str, schema: &LogSchema) -> Result<ParsedLine, ParseError> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Err(ParseError::MalformedLine("empty line".into()));
    }
    let tokens = tokenize(trimmed);
    let mut empty_fields = 0usize;

    let ip = required(&tokens, schema.ip, "ip")?;
    if is_empty_token(ip) {
        return Err(ParseError::MalformedLine("empty ip field".into()));
    }

    let ts_tok = required(&tokens, schema.timestamp, "timestamp")?;
    let timestamp = parse_clf_timestamp(ts_tok, schema.timestamp)?;

    let request = required(&tokens, schema.request, "request")?;
    let mut req_parts = request.split_whitespace();
    let method_tok = req_parts
        .next()
        .ok_or_else(|| ParseError::MalformedLine("empty request string".into()))?;
    let content_url = req_parts
        .next()
        .ok_or_else(|| ParseError::MalformedLine("request string without url".into()))?;
    let http_method = HttpMethod::parse(method_tok);

    let status_tok = required(&tokens, schema.status_code, "status code")?;
    let status_code: u16 = status_tok.parse().map_err(|_| ParseError::BadInteger {
        field: "status_code",
        token: status_tok.to_string(),
    })?;
    if !(100..=599).contains(&status_code) {
        return Err(ParseError::BadInteger {
            field: "status_code",
            token: status_tok.to_string(),
        });
    }

    let mut opt_uint = |pos: Option<usize>, field: &'static str| -> Result<u64, ParseError> {
        match pos {
            None => Ok(0),
            Some(p) => {
                let tok = required(&tokens, p, field)?;
                if is_empty_token(tok) {
                    empty_fields += 1;
                    Ok(0)
                } else {
                    tok.parse().map_err(|_| ParseError::BadInteger {
                        field,
                        token: tok.to_string(),
                    })
                }
            }
        }
    };
    let bytes = opt_uint(schema.bytes, "bytes")?;
    let delivery_time_ms = opt_uint(schema.delivery_time_ms, "delivery_time_ms")?;

    let mut opt_str = |pos: Option<usize>, what: &str| -> Result<Option<String>, ParseError> {
        match pos {
            None => Ok(None),
            Some(p) => {
                let tok = required(&tokens, p, what)?;
                if is_empty_token(tok) {
                    empty_fields += 1;
                    Ok(None)
                } else {
                    Ok(Some(tok.to_string()))
                }
            }
        }
    };
    let service_type = opt_str(schema.service_type, "service_type")?
        .map(|s| ServiceType::parse(&s))
        .unwrap_or(ServiceType::Other);
    let cache_hit = opt_str(schema.cache_hit, "cache_hit")?
        .map(|s| matches!(s.as_str(), "hit" | "1" | "true"))
        .unwrap_or(false);
    let node = opt_str(schema.node, "node")?.unwrap_or_else(|| "-".to_string());
    let account_offering =
        opt_str(schema.account_offering, "account_offering")?.unwrap_or_else(|| "-".to_string());
    let content_type = opt_str(schema.content_type, "content_type")?
        .map(|s| ContentType::parse(&s))
        .unwrap_or(ContentType::Other);

    Ok(ParsedLine {
        record: CleanRecord {
            ip: ip.to_string(),
            timestamp,
            http_method,
            status_code,
            bytes,
            delivery_time_ms,
            service_type,
            cache_hit,
            node,
            account_offering,
            content_url: content_url.to_string(),
            content_type,
        },
        empty_fields,
    })
}

/// Drops failed parses and records with more than `max_empty_fields`
/// empty fields. Survivors keep their input order.
pub fn clean_records(
    parsed: impl IntoIterator<Item = Result<ParsedLine, ParseError>>,
    max_empty_fields: usize,
) -> (Vec<CleanRecord>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for item in parsed {
        match item {
            Ok(p) if p.empty_fields <= max_empty_fields => kept.push(p.record),
            _ => dropped += 1,
        }
    }
    (kept, dropped)
}

/// Parses and cleans a whole log stream.
pub fn read_log<R: BufRead>(
    reader: R,
    schema: &LogSchema,
    max_empty_fields: usize,
) -> std::io::Result<(Vec<CleanRecord>, usize)> {
    let mut results = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(parse_log_line(&line, &LogSchema::clone(schema)));
    }
    Ok(clean_records(results, max_empty_fields))
}

pub const RECORD_CSV_HEADER: [&str; 12] = [
    "ip",
    "timestamp",
    "http_method",
    "status_code",
    "bytes",
    "delivery_time_ms",
    "service_type",
    "cache_hit",
    "node",
    "account_offering",
    "content_url",
    "content_type",
];

/// Writes records as a delimited columnar file with a header row.
pub fn write_records_csv<W: Write>(w: W, records: &[CleanRecord]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RECORD_CSV_HEADER)?;
    for r in records {
        wtr.write_record([
            r.ip.as_str(),
            &r.timestamp.to_string(),
            &r.http_method.to_string(),
            &r.status_code.to_string(),
            &r.bytes.to_string(),
            &r.delivery_time_ms.to_string(),
            r.service_type.as_str(),
            if r.cache_hit { "1" } else { "0" },
            r.node.as_str(),
            r.account_offering.as_str(),
            r.content_url.as_str(),
            r.content_type.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads back a columnar record file produced by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<CleanRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();
        out.push(CleanRecord {
            ip: get(0),
            timestamp: get(1).parse().unwrap_or(0),
            http_method: HttpMethod::parse(&get(2)),
            status_code: get(3).parse().unwrap_or(0),
            bytes: get(4).parse().unwrap_or(0),
            delivery_time_ms: get(5).parse().unwrap_or(0),
            service_type: ServiceType::parse(&get(6)),
            cache_hit: get(7) == "1",
            node: get(8),
            account_offering: get(9),
            content_url: get(10),
            content_type: ContentType::parse(&get(11)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Schema for classic combined logs that stop after the byte count.
    fn combined_schema() -> LogSchema {
        LogSchema {
            ip: 0,
            timestamp: 3,
            request: 4,
            status_code: 5,
            bytes: Some(6),
            delivery_time_ms: None,
            service_type: None,
            cache_hit: None,
            node: None,
            account_offering: None,
            content_type: None,
        }
    }

    #[test]
    fn parses_classic_combined_sample() {
        let line = r#"127.0.0.1 - - [12/Dec/2016:04:54:20 -4000] "GET /support.html HTTP/1.1" 200 11179 - "Mozilla/5.0(compatible;Googlebot/2.1;+http://www.google.com/bot.html)""#;
        let parsed = parse_log_line(line, &combined_schema()).unwrap();
        let r = parsed.record;
        assert_eq!(r.ip, "127.0.0.1");
        assert_eq!(r.http_method, HttpMethod::Get);
        assert_eq!(r.status_code, 200);
        assert_eq!(r.bytes, 11179);
        assert_eq!(r.content_url, "/support.html");
        assert!(r.timestamp > 0);
    }

    #[test]
    fn empty_line_is_malformed() {
        let err = parse_log_line("", &LogSchema::default()).unwrap_err();
        assert!(matches!(err, ParseError::MalformedLine(_)));
        let err = parse_log_line("   ", &LogSchema::default()).unwrap_err();
        assert!(matches!(err, ParseError::MalformedLine(_)));
    }

    #[test]
    fn non_numeric_status_is_bad_integer() {
        let line = r#"10.0.0.1 - - [01/Jan/2026:00:00:00 +0000] "GET /a HTTP/1.1" ABC 100"#;
        let err = parse_log_line(line, &combined_schema()).unwrap_err();
        assert_eq!(
            err,
            ParseError::BadInteger {
                field: "status_code",
                token: "ABC".to_string()
            }
        );
    }

    #[test]
    fn short_line_reports_missing_field() {
        let line = r#"10.0.0.1 - - [01/Jan/2026:00:00:00 +0000] "GET /a HTTP/1.1""#;
        let err = parse_log_line(line, &combined_schema()).unwrap_err();
        assert!(matches!(err, ParseError::MalformedLine(_)));
    }

    #[test]
    fn zone_offset_folds_into_epoch() {
        let east = r#"1.2.3.4 - - [01/Jan/2026:12:00:00 +0200] "GET /x HTTP/1.1" 200 1"#;
        let utc = r#"1.2.3.4 - - [01/Jan/2026:10:00:00 +0000] "GET /x HTTP/1.1" 200 1"#;
        let schema = combined_schema();
        let a = parse_log_line(east, &schema).unwrap().record.timestamp;
        let b = parse_log_line(utc, &schema).unwrap().record.timestamp;
        assert_eq!(a, b);
    }

    fn full_line(ip: &str, url: &str) -> String {
        format!(
            r#"{ip} - - [05/Jan/2026:10:30:05 +0000] "GET {url} HTTP/1.1" 200 5120 37 static hit edge-01 ao-1 image"#
        )
    }

    #[test]
    fn default_schema_reads_all_twelve_fields() {
        let parsed = parse_log_line(&full_line("10.1.1.1", "/img/7.png"), &LogSchema::default()).unwrap();
        assert_eq!(parsed.empty_fields, 0);
        let r = parsed.record;
        assert_eq!(r.delivery_time_ms, 37);
        assert_eq!(r.service_type, ServiceType::Static);
        assert!(r.cache_hit);
        assert_eq!(r.node, "edge-01");
        assert_eq!(r.account_offering, "ao-1");
        assert_eq!(r.content_type, ContentType::Image);
    }

    #[test]
    fn cleaning_keeps_valid_lines_in_order() {
        let schema = LogSchema::default();
        let lines: Vec<String> = (0..10).map(|i| full_line(&format!("10.0.0.{i}"), "/a")).collect();
        let parsed: Vec<_> = lines.iter().map(|l| parse_log_line(l, &schema)).collect();
        let (kept, dropped) = clean_records(parsed, 3);
        assert_eq!(kept.len(), 10);
        assert_eq!(dropped, 0);
        for (i, r) in kept.iter().enumerate() {
            assert_eq!(r.ip, format!("10.0.0.{i}"));
        }
    }

    #[test]
    fn cleaning_drops_lines_with_many_empty_fields() {
        let schema = LogSchema::default();
        // Five empty optional fields out of nine declared.
        let sparse =
            r#"10.0.0.9 - - [05/Jan/2026:10:30:05 +0000] "GET /a HTTP/1.1" 200 - - - - edge-01 ao-1 image"#;
        let mut parsed: Vec<_> = (0..8)
            .map(|i| parse_log_line(&full_line(&format!("10.0.0.{i}"), "/a"), &schema))
            .collect();
        parsed.push(parse_log_line(sparse, &schema));
        parsed.push(parse_log_line(sparse, &schema));
        let (kept, dropped) = clean_records(parsed, 3);
        assert_eq!(kept.len(), 8);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn cleaning_drops_all_malformed_input() {
        let schema = LogSchema::default();
        let parsed: Vec<_> = ["", "garbage", "also garbage"]
            .iter()
            .map(|l| parse_log_line(l, &schema))
            .collect();
        let n = parsed.len();
        let (kept, dropped) = clean_records(parsed, 3);
        assert!(kept.is_empty());
        assert_eq!(dropped, n);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let schema = LogSchema::default();
        let records: Vec<CleanRecord> = (0..5)
            .map(|i| {
                parse_log_line(&full_line(&format!("10.2.0.{i}"), &format!("/v/{i}.mp4")), &schema)
                    .unwrap()
                    .record
            })
            .collect();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &records).unwrap();
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(records, back);
    }
}
