//! Coarse cosine ranking of a gallery, cross-encoder reranking of the
//! top candidates, and recall / mAP evaluation.

mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ImageMemory, Net, Params};
use crate::numerics::{Graph, Tensor};
use crate::textproc::{tokenize, TokenId, Vocabulary};

pub use metrics::{
    average_precision, first_hit, metrics_from_rankings, metrics_from_scores, rank_by_score, Metrics, RECALL_KS,
};

/// Ranking of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: usize,
    /// Gallery positions, best first.
    pub ranking: Vec<usize>,
    pub coarse: Vec<f64>,
    /// `(gallery position, fine score)` of the reranked candidates.
    pub fine: Vec<(usize, f64)>,
}

/// Final order: the `fine` candidates by fine score, then coarse score, then
/// id; every other item after them by coarse score, then id.
pub fn merge_ranking(coarse: &[f64], fine: &[(usize, f64)]) -> Vec<usize> {
    let mut head = fine.to_vec();
    head.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(coarse[b.0].total_cmp(&coarse[a.0]))
            .then(a.0.cmp(&b.0))
    });
    let chosen: BTreeSet<usize> = head.iter().map(|c| c.0).collect();
    let mut out: Vec<usize> = head.into_iter().map(|c| c.0).collect();
    out.extend(rank_by_score(coarse).into_iter().filter(|i| !chosen.contains(i)));
    out
}

/// A gallery encoded once: normalized coarse embeddings plus cross-attention
/// memories, on an inference graph.
pub struct EncodedGallery {
    graph: Graph,
    net: Net,
    memories: Vec<ImageMemory>,
    /// `n × proj_dim`, unit rows.
    pub embeddings: Tensor,
}

impl EncodedGallery {
    pub fn new(params: &Params, images: &[Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Argument("empty gallery".into()));
        }
        let mut graph = Graph::inference();
        let net = params.bind(&mut graph);
        let mut memories = Vec::with_capacity(images.len());
        let mut globals = Vec::with_capacity(images.len());
        for img in images {
            let out = net.encode_image(&mut graph, img)?;
            globals.push(out.global(&mut graph)?);
            memories.push(net.image_memory(&mut graph, out)?);
        }
        let stacked = graph.concat_rows(&globals)?;
        let proj = net.project(&mut graph, stacked, &net.layout.proj_image)?;
        let unit = graph.row_normalize(proj);
        let embeddings = graph.value(unit).clone();
        Ok(Self {
            graph,
            net,
            memories,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    /// Cosine of the projected query text with every gallery image.
    pub fn coarse_rank(&mut self, query: &[TokenId]) -> Result<Vec<f64>> {
        let mark = self.graph.len();
        let g = &mut self.graph;
        let text = self.net.encode_text(g, query)?;
        let global = text.global(g)?;
        let proj = self.net.project(g, global, &self.net.layout.proj_text)?;
        let q = g.value(proj).clone();
        let n = q.norm();
        let scores = if n == 0.0 {
            log::warn!("query projects to the zero vector; coarse scores are 0");
            vec![0.0; self.len()]
        } else {
            crate::numerics::matmul(&self.embeddings, &q.transpose())?
                .into_data()
                .into_iter()
                .map(|s| s / n)
                .collect()
        };
        self.graph.truncate(mark);
        Ok(scores)
    }

    /// Cross-encoder matching logits of the query against `candidates`.
    pub fn fine_scores(&mut self, query: &[TokenId], candidates: &[usize]) -> Result<Vec<f64>> {
        let mark = self.graph.len();
        let g = &mut self.graph;
        let text = self.net.encode_text(g, query)?;
        let mut out = Vec::with_capacity(candidates.len());
        for &c in candidates {
            let memory = self
                .memories
                .get(c)
                .ok_or_else(|| Error::Argument(format!("gallery item {c} out of {}", self.memories.len())))?;
            let fusion = self.net.cross_encode(g, text, memory, None)?;
            let s = self.net.fine_score(g, &fusion)?;
            out.push(g.scalar(s));
        }
        self.graph.truncate(mark);
        Ok(out)
    }

    /// Reranks the `k` best coarse candidates by fine score.
    pub fn rerank_topk(&mut self, query_id: usize, query: &[TokenId], coarse: Vec<f64>, k: usize) -> Result<RetrievalResult> {
        if k == 0 || k > self.len() {
            return Err(Error::Config(format!("k={k} must lie in 1..={}", self.len())));
        }
        let top: Vec<usize> = rank_by_score(&coarse).into_iter().take(k).collect();
        let scores = self.fine_scores(query, &top)?;
        let fine: Vec<(usize, f64)> = top.into_iter().zip(scores).collect();
        Ok(RetrievalResult {
            query: query_id,
            ranking: merge_ranking(&coarse, &fine),
            coarse,
            fine,
        })
    }

    /// Grad-free graph allocation count (always zero for an inference graph).
    pub fn grad_allocations(&self) -> usize {
        self.graph.grad_allocations()
    }
}

/// Metrics plus the per-query rankings behind them.
pub struct Evaluation {
    pub metrics: Metrics,
    pub results: Vec<RetrievalResult>,
    pub relevant: Vec<BTreeSet<usize>>,
}

/// Two-stage retrieval of every query against the gallery. `relevant[q]`
/// lists gallery positions matching query `q`; `k` is clamped to the
/// gallery size.
pub fn evaluate(
    params: &Params,
    queries: &[Vec<TokenId>],
    gallery: &[Tensor],
    relevant: &[BTreeSet<usize>],
    k: usize,
) -> Result<Evaluation> {
    if queries.len() != relevant.len() {
        return Err(Error::Argument(format!(
            "{} queries but {} relevance sets",
            queries.len(),
            relevant.len()
        )));
    }
    let mut enc = EncodedGallery::new(params, gallery)?;
    let k = k.min(enc.len());
    let mut results = Vec::with_capacity(queries.len());
    for (q, ids) in queries.iter().enumerate() {
        let coarse = enc.coarse_rank(ids)?;
        results.push(enc.rerank_topk(q, ids, coarse, k)?);
    }
    let rankings: Vec<Vec<usize>> = results.iter().map(|r| r.ranking.clone()).collect();
    Ok(Evaluation {
        metrics: metrics_from_rankings(&rankings, relevant),
        results,
        relevant: relevant.to_vec(),
    })
}

/// Captions of `indices` as queries against their images as the gallery,
/// relevance by identity.
pub fn split_task(ds: &Dataset, indices: &[usize], vocab: &Vocabulary) -> Result<RetrievalTask> {
    let mut task = RetrievalTask::default();
    let n = ds.patch_grid.0 * ds.patch_grid.1;
    for &i in indices {
        let r = ds
            .records
            .get(i)
            .ok_or_else(|| Error::Argument(format!("record {i} out of {}", ds.records.len())))?;
        task.queries.push(vocab.encode(&tokenize(&r.caption)));
        task.gallery.push(r.image.clone().reshape(&[n, ds.patch_pixels])?);
    }
    for &qi in indices {
        let id = ds.records[qi].identity;
        task.relevant.push(
            indices
                .iter()
                .enumerate()
                .filter(|&(_, &gi)| ds.records[gi].identity == id)
                .map(|(pos, _)| pos)
                .collect(),
        );
    }
    Ok(task)
}

/// Queries, gallery and ground truth of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalTask {
    pub queries: Vec<Vec<TokenId>>,
    pub gallery: Vec<Tensor>,
    pub relevant: Vec<BTreeSet<usize>>,
}

impl RetrievalTask {
    pub fn evaluate(&self, params: &Params, k: usize) -> Result<Evaluation> {
        evaluate(params, &self.queries, &self.gallery, &self.relevant, k)
    }
}

/// Summary written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub k: usize,
    pub n_queries: usize,
    pub n_gallery: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(metrics: &Metrics, k: usize, n_gallery: usize, seed: u64) -> Self {
        Self {
            r1: metrics.r(1),
            r5: metrics.r(5),
            r10: metrics.r(10),
            map: metrics.map_score,
            k,
            n_queries: metrics.n_queries,
            n_gallery,
            seed,
        }
    }
}

/// `query,first_relevant_rank,average_precision,top1` per query.
pub fn per_query_csv(eval: &Evaluation) -> String {
    let mut out = String::from("query,first_relevant_rank,average_precision,top1\n");
    for (r, rel) in eval.results.iter().zip(&eval.relevant) {
        let rank = first_hit(&r.ranking, rel).map_or(String::new(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{:e},{}",
            r.query,
            rank,
            average_precision(&r.ranking, rel),
            r.ranking[0]
        )
        .expect("string write");
    }
    out
}
