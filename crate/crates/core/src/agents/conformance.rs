//! Contract checks any backend must pass. Run against the in-process mock in unit
//! tests and against a live server in the CLI integration tests.

use super::backend::{Backend, CallError};
use super::script::apply_ops;
use super::wire::*;

fn unit(v: &[f32]) -> bool {
    let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (n - 1.0).abs() <= 1e-4
}

/// Run every check; returns the list of violations (empty on success).
pub fn check_backend(b: &dyn Backend) -> Vec<String> {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: Result<(), String>| {
        if let Err(e) = ok {
            fails.push(format!("{name}: {e}"));
        }
    };

    check("embed_text", (|| {
        let r = b.embed_text(&EmbedTextRequest { texts: vec!["a H&E image of tumor".into(), "normal".into()] })
            .map_err(|e| e.to_string())?;
        if r.vectors.len() != 2 {
            return Err(format!("{} vectors for 2 texts", r.vectors.len()));
        }
        if r.vectors.iter().any(|v| v.len() != r.d || !unit(v)) {
            return Err("vectors must have length d and unit norm".into());
        }
        Ok(())
    })());

    check("embed_image", (|| {
        let r = b.embed_image(&EmbedImageRequest {
            patch_ids: vec!["0123456789abcdef".into()],
            uris: vec!["patch://s/0/0".into()],
        })
        .map_err(|e| e.to_string())?;
        if r.vectors.len() != 1 || !unit(&r.vectors[0]) || r.vectors[0].len() != r.d {
            return Err("expected one unit vector of length d".into());
        }
        Ok(())
    })());

    check("embed_image length mismatch", match b.embed_image(&EmbedImageRequest {
        patch_ids: vec!["a".into(), "b".into()],
        uris: vec!["patch://s/0/0".into()],
    }) {
        Err(CallError::Permanent { .. }) => Ok(()),
        other => Err(format!("expected a 4xx, got {other:?}")),
    });

    check("describe", (|| {
        let r = b.describe(&DescribeRequest {
            patch_id: "0123456789abcdef".into(),
            uri: "patch://s/0/0".into(),
            source: "lung".into(),
            template: "This is a histopathology image from lung, describe this image in detail".into(),
        })
        .map_err(|e| e.to_string())?;
        if r.text.trim().is_empty() {
            return Err("empty description".into());
        }
        Ok(())
    })());

    check("revise", (|| {
        let text = "Cells appear to be enlarged. Correlation with clinical findings is recommended.";
        let r = b.revise(&ReviseRequest { text: text.into() }).map_err(|e| e.to_string())?;
        let applied = apply_ops(text, &r.ops).map_err(|e| e.to_string())?;
        if applied != r.text {
            return Err("ops do not reproduce the returned text".into());
        }
        Ok(())
    })());

    check("summarize", (|| {
        let text = vec!["nuclei"; 150].join(" ");
        for max_tokens in [1, 10, 77] {
            let r = b.summarize(&SummarizeRequest { text: text.clone(), max_tokens }).map_err(|e| e.to_string())?;
            let n = r.text.split_whitespace().count();
            if n == 0 || n > max_tokens {
                return Err(format!("{n} tokens for max_tokens {max_tokens}"));
            }
        }
        Ok(())
    })());

    check("complete attributes", (|| {
        let r = b
            .complete(&CompleteRequest { task: CompleteTask::Attributes, text: "lung".into(), count: 20, attempt: 0 })
            .map_err(|e| e.to_string())?;
        let n = r.text.lines().filter(|l| !l.trim().is_empty()).count();
        if n < 20 {
            return Err(format!("{n} attributes, expected 20"));
        }
        Ok(())
    })());

    fails
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::MockBackend;

    #[test]
    fn mock_conforms() {
        assert_eq!(check_backend(&MockBackend::with_seed(0)), Vec::<String>::new());
    }
}
