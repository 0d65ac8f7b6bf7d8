//! Representative screenshot selection: a deterministic farthest-point
//! diversity pre-filter in embedding space, then a model-backed rerank for
//! semantic value.

use serde_json::json;

use crate::gateway::{
    chat_structured, ChatEndpoint, ContentPart, Embedder, GatewayError, Message, MsgRole,
    ScreenshotResolver,
};
use crate::par;
use crate::trajectory::Observation;

use super::PromptTemplates;

/// Farthest-point traversal order over cosine distance. The first pick is
/// the lexicographically lowest reference hash; every later pick maximizes
/// the minimum distance to the picked set, breaking ties toward the lower
/// hash. Returns indices into `refs` in pick order.
pub fn farthest_point_order(refs: &[String], vectors: &[Vec<f32>]) -> Vec<usize> {
    assert_eq!(refs.len(), vectors.len());
    let n = refs.len();
    if n == 0 {
        return vec![];
    }
    let first = (0..n).min_by(|a, b| refs[*a].cmp(&refs[*b])).expect("non-empty");
    let mut order = vec![first];
    // min cosine distance to the selected set, per candidate
    let mut min_dist: Vec<f32> = (0..n)
        .map(|i| 1.0 - crate::gateway::cosine_similarity(&vectors[i], &vectors[first]))
        .collect();
    while order.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if order.contains(&i) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    // Strictly farther wins; ties go to the lower ref hash.
                    if min_dist[i] > min_dist[b]
                        || (min_dist[i] == min_dist[b] && refs[i] < refs[b])
                    {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let pick = best.expect("candidates remain");
        order.push(pick);
        for i in 0..n {
            let d = 1.0 - crate::gateway::cosine_similarity(&vectors[i], &vectors[pick]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    order
}

/// Select up to `k` representative screenshots from an observation pool.
///
/// The pool is deduplicated by reference, embedded, reduced to at most `4k`
/// candidates by farthest-point selection, and handed to the reranker, which
/// must return exactly `min(k, candidates)` indices. A reranker schema
/// violation falls back to the farthest-point prefix. Selection order is
/// stable.
pub fn select_screenshots(
    pool: &[Observation],
    resolver: &dyn ScreenshotResolver,
    embedder: &dyn Embedder,
    reranker: &ChatEndpoint,
    templates: &PromptTemplates,
    k: usize,
) -> Result<Vec<Observation>, GatewayError> {
    assert!(k >= 1, "k must be at least 1");
    let mut seen = std::collections::BTreeSet::new();
    let mut deduped: Vec<Observation> = Vec::new();
    for obs in pool {
        if seen.insert(obs.screenshot_ref.clone()) {
            deduped.push(obs.clone());
        }
    }
    if deduped.is_empty() {
        return Ok(vec![]);
    }

    let embedded: Vec<Result<Vec<f32>, GatewayError>> = par::map_collect(&deduped, |obs| {
        if let Some(vec) = &obs.feature_vec {
            return Ok(vec.clone());
        }
        let bytes = resolver
            .resolve(&obs.screenshot_ref)
            .ok_or_else(|| GatewayError::UnresolvedImage(obs.screenshot_ref.clone()))?;
        embedder.embed(&bytes)
    });
    let mut vectors = Vec::with_capacity(deduped.len());
    for (obs, result) in deduped.iter_mut().zip(embedded) {
        let vec = result?;
        obs.feature_vec = Some(vec.clone());
        vectors.push(vec);
    }

    let refs: Vec<String> = deduped.iter().map(|o| o.screenshot_ref.clone()).collect();
    let order = farthest_point_order(&refs, &vectors);
    let candidate_indices: Vec<usize> = order.into_iter().take(4 * k).collect();
    let take = k.min(candidate_indices.len());

    let machine_context = json!({
        "k": take,
        "candidate_count": candidate_indices.len(),
    })
    .to_string();
    let prompt = templates.reranker(take, &machine_context);
    let mut parts = vec![ContentPart::Text { text: prompt }];
    for (label, &idx) in candidate_indices.iter().enumerate() {
        parts.push(ContentPart::Text { text: format!("Image {label}:") });
        parts.push(ContentPart::Image { screenshot_ref: deduped[idx].screenshot_ref.clone() });
    }
    let messages = vec![Message { role: MsgRole::User, parts }];

    let selection = chat_structured(reranker, &messages, |raw| {
        let value: serde_json::Value = serde_json::from_str(raw.trim()).map_err(|e| e.to_string())?;
        let indices: Vec<usize> = value["selected_indices"]
            .as_array()
            .ok_or("selected_indices missing")?
            .iter()
            .map(|v| v.as_u64().map(|u| u as usize).ok_or("non-integer index"))
            .collect::<Result<_, _>>()?;
        if indices.len() != take {
            return Err(format!("expected exactly {take} indices, got {}", indices.len()));
        }
        let mut unique = std::collections::BTreeSet::new();
        for &i in &indices {
            if i >= candidate_indices.len() {
                return Err(format!("index {i} out of range"));
            }
            if !unique.insert(i) {
                return Err(format!("index {i} repeated"));
            }
        }
        Ok(indices)
    });

    let picked: Vec<usize> = match selection {
        Ok(indices) => indices,
        Err(GatewayError::SchemaViolation { error, .. }) => {
            log::warn!("reranker schema violation ({error}); falling back to diversity order");
            (0..take).collect()
        }
        Err(other) => return Err(other),
    };
    Ok(picked.into_iter().map(|i| deduped[candidate_indices[i]].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnChat, HashProjectionEmbedder};
    use std::sync::Arc;

    struct MapResolver(std::collections::BTreeMap<String, Vec<u8>>);
    impl ScreenshotResolver for MapResolver {
        fn resolve(&self, screenshot_ref: &str) -> Option<Vec<u8>> {
            self.0.get(screenshot_ref).cloned()
        }
    }

    fn obs(r: &str) -> Observation {
        Observation { step_index: 1, screenshot_ref: r.into(), feature_vec: None }
    }

    fn first_k_reranker() -> ChatEndpoint {
        ChatEndpoint::scripted(Arc::new(FnChat(|messages: &[Message]| {
            let text = messages[0].text();
            let k: usize = text
                .lines()
                .find_map(|l| l.strip_prefix("Select exactly "))
                .and_then(|rest| rest.split_whitespace().next())
                .and_then(|n| n.parse().ok())
                .ok_or("no k in prompt")?;
            let indices: Vec<usize> = (0..k).collect();
            let reasons: Vec<serde_json::Value> = indices
                .iter()
                .map(|i| serde_json::json!({"index": i, "reason": "coverage"}))
                .collect();
            Ok(serde_json::json!({"selected_indices": indices, "reasons": reasons}).to_string())
        })))
    }

    fn pool_with_bytes(n: usize) -> (Vec<Observation>, MapResolver) {
        let mut map = std::collections::BTreeMap::new();
        let mut pool = Vec::new();
        for i in 0..n {
            let r = format!("{i:02}ref");
            map.insert(r.clone(), format!("image bytes number {i} {}", "x".repeat(i)).into_bytes());
            pool.push(obs(&r));
        }
        (pool, MapResolver(map))
    }

    #[test]
    fn fps_first_pick_is_lowest_hash() {
        let refs = vec!["bb".to_string(), "aa".to_string(), "cc".to_string()];
        let vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]];
        let order = farthest_point_order(&refs, &vectors);
        assert_eq!(order[0], 1, "lowest ref hash first");
        assert_eq!(order.len(), 3);
    }

    #[test]
    fn fps_maximizes_min_distance() {
        // Brute-force check on a small instance: the second pick must be the
        // point farthest from the first.
        let refs: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
        let vectors = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
        ];
        let order = farthest_point_order(&refs, &vectors);
        assert_eq!(order[0], 0);
        assert_eq!(order[1], 2, "orthogonal vector is farthest");
    }

    #[test]
    fn small_pool_returns_everything() {
        let (pool, resolver) = pool_with_bytes(3);
        let embedder = HashProjectionEmbedder::new(8, 1);
        let reranker = first_k_reranker();
        let out = select_screenshots(
            &pool,
            &resolver,
            &embedder,
            &reranker,
            &PromptTemplates::builtin(),
            10,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.feature_vec.is_some()));
    }

    #[test]
    fn duplicates_are_removed_before_selection() {
        let (mut pool, resolver) = pool_with_bytes(3);
        pool.push(pool[0].clone());
        let embedder = HashProjectionEmbedder::new(8, 1);
        let reranker = first_k_reranker();
        let out = select_screenshots(
            &pool,
            &resolver,
            &embedder,
            &reranker,
            &PromptTemplates::builtin(),
            10,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn reranker_failure_falls_back_to_diversity_order() {
        let (pool, resolver) = pool_with_bytes(6);
        let embedder = HashProjectionEmbedder::new(8, 1);
        let bad = ChatEndpoint::scripted(Arc::new(FnChat(|_m: &[Message]| {
            Ok("sure, here are my favorites!".to_string())
        })));
        let out = select_screenshots(
            &pool,
            &resolver,
            &embedder,
            &bad,
            &PromptTemplates::builtin(),
            2,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        // Fallback follows farthest-point order, whose first pick is the
        // lowest ref.
        assert_eq!(out[0].screenshot_ref, "00ref");
    }

    #[test]
    fn selection_is_stable() {
        let (pool, resolver) = pool_with_bytes(12);
        let embedder = HashProjectionEmbedder::new(8, 1);
        let reranker1 = first_k_reranker();
        let reranker2 = first_k_reranker();
        let a = select_screenshots(&pool, &resolver, &embedder, &reranker1, &PromptTemplates::builtin(), 4).unwrap();
        let b = select_screenshots(&pool, &resolver, &embedder, &reranker2, &PromptTemplates::builtin(), 4).unwrap();
        assert_eq!(a, b);
    }
}
