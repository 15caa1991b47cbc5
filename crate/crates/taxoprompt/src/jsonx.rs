//! Extraction of a JSON object from LLM output that may wrap it in prose or
//! markdown code fences.

/// Find and parse the first JSON object in `content`.
///
/// Candidate objects are located by scanning for `{` and walking a balanced
/// span (string- and escape-aware); the first span that parses wins. Returns
/// the parse error of the last candidate when none parses.
pub(crate) fn extract_json_object(content: &str) -> Result<serde_json::Value, String> {
    let bytes = content.as_bytes();
    let mut last_error = "no JSON object found in response".to_string();
    let mut search_from = 0;
    while let Some(offset) = content[search_from..].find('{') {
        let start = search_from + offset;
        match balanced_object_end(bytes, start) {
            Some(end) => {
                let candidate = &content[start..end];
                match serde_json::from_str::<serde_json::Value>(candidate) {
                    Ok(value) if value.is_object() => return Ok(value),
                    Ok(_) => last_error = "top-level JSON value is not an object".to_string(),
                    Err(e) => last_error = e.to_string(),
                }
            }
            None => {
                last_error = "unbalanced braces in response".to_string();
            }
        }
        search_from = start + 1;
    }
    Err(last_error)
}

/// Byte offset one past the `}` closing the object that opens at `start`,
/// or `None` when the braces never balance.
fn balanced_object_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
