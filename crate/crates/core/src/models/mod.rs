//! Draft/target model interface and its two backends.
//!
//! A model sees a [`RevealState`] with `i` tokens revealed in ordering
//! order. The *draft* pass produces factorized rows for ranks `i, i+1, …`
//! that depend only on the revealed tokens. The *target* rows for rank `r`
//! additionally condition on drafted tokens at ranks `i..r` and never on the
//! token at rank `r` or later. The draft pass returns a cache so targets can
//! be recomputed for new drafted tokens without another non-causal pass.

pub mod checkpoint;
pub mod hybrid;
pub mod masks;
pub mod nn;
pub mod tabular;

use crate::error::Result;
use crate::types::{ProbRow, RevealState, SequenceSpec, Token};

pub use hybrid::{HybridCache, HybridConfig, HybridModel, HybridParams, LossParts, MaskedExample};
pub use masks::build_attention_masks;
pub use tabular::{DraftMode, TabularModel};

pub trait DraftTargetModel {
    /// State retained from the non-causal pass.
    type Cache;

    fn spec(&self) -> SequenceSpec;

    /// `(non-causal blocks, causal blocks)`, used for NFE accounting.
    fn block_counts(&self) -> (usize, usize);

    /// Non-causal pass: draft rows for ranks `i..i + horizon`.
    fn draft_pass(&self, state: &RevealState, horizon: usize) -> Result<(Vec<ProbRow>, Self::Cache)>;

    /// Target rows for ranks `ranks.start..ranks.end`.
    ///
    /// `drafted[k]` is the token at rank `i + k`; at least
    /// `ranks.end - 1 - i` tokens must be supplied.
    fn target_rows(
        &self,
        cache: &Self::Cache,
        drafted: &[Token],
        ranks: std::ops::Range<usize>,
    ) -> Result<Vec<ProbRow>>;

    /// Whether samplers should request target rows one rank at a time, only
    /// after the preceding ranks were accepted. Cheap exact backends prefer
    /// this because drafted prefixes may be impossible contexts.
    fn lazy_targets(&self) -> bool {
        false
    }
}

impl<M: DraftTargetModel + ?Sized> DraftTargetModel for &M {
    type Cache = M::Cache;

    fn spec(&self) -> SequenceSpec {
        (**self).spec()
    }

    fn block_counts(&self) -> (usize, usize) {
        (**self).block_counts()
    }

    fn draft_pass(&self, state: &RevealState, horizon: usize) -> Result<(Vec<ProbRow>, Self::Cache)> {
        (**self).draft_pass(state, horizon)
    }

    fn target_rows(
        &self,
        cache: &Self::Cache,
        drafted: &[Token],
        ranks: std::ops::Range<usize>,
    ) -> Result<Vec<ProbRow>> {
        (**self).target_rows(cache, drafted, ranks)
    }

    fn lazy_targets(&self) -> bool {
        (**self).lazy_targets()
    }
}

/// Wraps a model and counts non-causal and causal passes.
pub struct PassCounter<M> {
    pub inner: M,
    draft_passes: std::cell::Cell<usize>,
    target_calls: std::cell::Cell<usize>,
}

impl<M> PassCounter<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            draft_passes: std::cell::Cell::new(0),
            target_calls: std::cell::Cell::new(0),
        }
    }

    pub fn draft_passes(&self) -> usize {
        self.draft_passes.get()
    }

    pub fn target_calls(&self) -> usize {
        self.target_calls.get()
    }
}

impl<M: DraftTargetModel> DraftTargetModel for PassCounter<M> {
    type Cache = M::Cache;

    fn spec(&self) -> SequenceSpec {
        self.inner.spec()
    }

    fn block_counts(&self) -> (usize, usize) {
        self.inner.block_counts()
    }

    fn draft_pass(&self, state: &RevealState, horizon: usize) -> Result<(Vec<ProbRow>, Self::Cache)> {
        self.draft_passes.set(self.draft_passes.get() + 1);
        self.inner.draft_pass(state, horizon)
    }

    fn target_rows(
        &self,
        cache: &Self::Cache,
        drafted: &[Token],
        ranks: std::ops::Range<usize>,
    ) -> Result<Vec<ProbRow>> {
        self.target_calls.set(self.target_calls.get() + 1);
        self.inner.target_rows(cache, drafted, ranks)
    }

    fn lazy_targets(&self) -> bool {
        self.inner.lazy_targets()
    }
}
