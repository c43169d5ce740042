//! Parsing of structured model replies.

use serde::de::DeserializeOwned;

/// The JSON value embedded in a chat reply: the reply itself, the body of a
/// fenced code block, or the span from the first `{`/`[` to the last `}`/`]`.
pub fn json_span(text: &str) -> &str {
    let t = text.trim();
    if let Some(start) = t.find("```") {
        let body = &t[start + 3..];
        let body = body.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        if let Some(end) = body.find("```") {
            return body[..end].trim();
        }
    }
    let open = t.find(['{', '[']);
    let close = t.rfind(['}', ']']);
    match (open, close) {
        (Some(a), Some(b)) if a < b => &t[a..=b],
        _ => t,
    }
}

/// Deserializes the JSON value in `text`, returning a message suitable for
/// feeding back to the model on failure.
pub fn parse_reply<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    serde_json::from_str(json_span(text)).map_err(|e| format!("invalid JSON: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_fenced_and_bare_json() {
        assert_eq!(json_span("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(json_span("Sure! {\"a\":[1]} hope that helps"), "{\"a\":[1]}");
        assert_eq!(json_span("[1,2]"), "[1,2]");
        let v: serde_json::Value = parse_reply("here: {\"k\": true}").unwrap();
        assert_eq!(v["k"], true);
        assert!(parse_reply::<serde_json::Value>("no json").is_err());
    }
}
