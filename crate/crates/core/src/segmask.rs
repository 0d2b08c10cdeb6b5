//! Chain segmentation and construction of the specialized attention masks.
//!
//! The encoder-side induction mask (LTIM) lets each latent slot see only the
//! question and the explicit reasoning segments up to its own, never other
//! slots. The decoder-side supervision mask (LTSuM) forces the suffix decoded
//! at conditioning step `i` to rely on the question and the first `i` latent
//! tokens alone, with past explicit segments and future latent tokens blocked.

use crate::error::{Error, Result};

/// Boolean allow-matrix over sequence positions. `allow[i][j]` is true iff
/// position `i` may attend to position `j`.
///
/// Invariants: every position attends to itself, and no position attends to
/// the future.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Vec<bool>,
    len: usize,
}

impl AttentionMask {
    pub fn new(allow: Vec<bool>, len: usize) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::invalid("mask buffer does not match length"));
        }
        for i in 0..len {
            if !allow[i * len + i] {
                return Err(Error::invalid(format!("position {i} does not attend to itself")));
            }
            for j in (i + 1)..len {
                if allow[i * len + j] {
                    return Err(Error::invalid(format!("future attention {i} -> {j}")));
                }
            }
        }
        Ok(AttentionMask { allow, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Set of allowed columns for row `i`.
    pub fn row_allowed(&self, i: usize) -> Vec<usize> {
        (0..self.len).filter(|&j| self.allows(i, j)).collect()
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&b| b).count()
    }

    /// Pack row-major into bytes, LSB first, for golden-file comparisons.
    pub fn to_bitpacked(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.allow.len().div_ceil(8)];
        for (idx, &b) in self.allow.iter().enumerate() {
            if b {
                out[idx / 8] |= 1 << (idx % 8);
            }
        }
        out
    }

    pub fn from_bitpacked(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != (len * len).div_ceil(8) {
            return Err(Error::invalid("bit-packed mask size mismatch"));
        }
        let allow: Vec<bool> =
            (0..len * len).map(|idx| bytes[idx / 8] & (1 << (idx % 8)) != 0).collect();
        AttentionMask::new(allow, len)
    }
}

/// Position role within a laid-out training sequence. Segment and slot
/// indices are 1-based (`S_1..S_N`, `L_1..L_N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Question,
    ThinkOpen,
    Explicit { seg: usize, off: usize },
    LatentSlot { seg: usize },
    ThinkClose,
    Answer { off: usize },
}

/// Ordered roles, positions contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<Role>,
}

impl SequenceLayout {
    pub fn new(roles: Vec<Role>) -> Self {
        SequenceLayout { roles }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, pos: usize) -> Role {
        self.roles[pos]
    }

    /// Number of latent slots in the layout.
    pub fn slot_count(&self) -> usize {
        self.roles.iter().filter(|r| matches!(r, Role::LatentSlot { .. })).count()
    }

    /// Position of latent slot `seg` (1-based), if present.
    pub fn slot_position(&self, seg: usize) -> Option<usize> {
        self.roles.iter().position(|r| matches!(r, Role::LatentSlot { seg: s } if *s == seg))
    }

    pub fn positions(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&p| pred(self.roles[p])).collect()
    }
}

/// Reserved token ids a segmented example needs to lay itself out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Markers {
    pub think_open: u32,
    pub think_close: u32,
    pub slot: u32,
    pub eos: u32,
    pub pad: u32,
}

/// A reasoning problem decomposed into question tokens, ordered explicit
/// segments `S_1..S_N`, latent slots, and answer tokens.
#[derive(Debug, Clone)]
pub struct SegmentedExample {
    pub question: Vec<u32>,
    pub segments: Vec<Vec<u32>>,
    pub answer: Vec<u32>,
    pub markers: Markers,
}

impl SegmentedExample {
    /// Segment a tokenized chain at fixed ratio `r` and assemble the example.
    pub fn new(
        question: Vec<u32>,
        chain: &[u32],
        answer: Vec<u32>,
        markers: Markers,
        r: usize,
    ) -> Result<Self> {
        if question.is_empty() || answer.is_empty() {
            return Err(Error::invalid("question and answer must be nonempty"));
        }
        let segments = segment_fixed(chain, r)?;
        Ok(SegmentedExample { question, segments, answer, markers })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn chain_len(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }

    fn segment_lens(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len()).collect()
    }

    pub fn encoder_layout(&self) -> SequenceLayout {
        encoder_layout(self.question.len(), &self.segment_lens())
    }

    pub fn decoder_layout(&self) -> SequenceLayout {
        stage1_decoder_layout(self.question.len(), &self.segment_lens(), self.answer.len())
    }

    /// Encoder input tokens: `[Q.., <think>, S_1.., <slot>, ..., S_N.., <slot>]`.
    pub fn encoder_tokens(&self) -> Vec<u32> {
        let mut out = self.question.clone();
        out.push(self.markers.think_open);
        for seg in &self.segments {
            out.extend_from_slice(seg);
            out.push(self.markers.slot);
        }
        out
    }

    /// Token at a decoder-layout position, if the position holds a token
    /// (latent slots hold dense vectors instead).
    pub fn decoder_token_at(&self, role: Role) -> Option<u32> {
        match role {
            Role::Question => None, // caller indexes question directly
            Role::ThinkOpen => Some(self.markers.think_open),
            Role::ThinkClose => Some(self.markers.think_close),
            Role::Explicit { seg, off } => Some(self.segments[seg - 1][off]),
            Role::Answer { off } => Some(self.answer[off]),
            Role::LatentSlot { .. } => None,
        }
    }
}

/// Encoder layout: `[Q.., <think>, S_1.., L_1, ..., S_N.., L_N]`.
pub fn encoder_layout(question_len: usize, segment_lens: &[usize]) -> SequenceLayout {
    let mut roles = Vec::new();
    roles.extend((0..question_len).map(|_| Role::Question));
    roles.push(Role::ThinkOpen);
    for (s, &len) in segment_lens.iter().enumerate() {
        let seg = s + 1;
        roles.extend((0..len).map(|off| Role::Explicit { seg, off }));
        roles.push(Role::LatentSlot { seg });
    }
    SequenceLayout::new(roles)
}

/// Stage-1 decoder layout: `[Q.., <think>, z_1, S_2.., z_2, ..., S_N.., z_N,
/// </think>, Answer..]`. The interleaved explicit segments are layout, not
/// attention-visible content for the supervised suffix.
pub fn stage1_decoder_layout(
    question_len: usize,
    segment_lens: &[usize],
    answer_len: usize,
) -> SequenceLayout {
    let mut roles = Vec::new();
    roles.extend((0..question_len).map(|_| Role::Question));
    roles.push(Role::ThinkOpen);
    let n = segment_lens.len();
    for seg in 1..=n {
        if seg >= 2 {
            roles.extend((0..segment_lens[seg - 1]).map(|off| Role::Explicit { seg, off }));
        }
        roles.push(Role::LatentSlot { seg });
    }
    roles.push(Role::ThinkClose);
    roles.extend((0..answer_len).map(|off| Role::Answer { off }));
    SequenceLayout::new(roles)
}

/// Stage-2 layout: `[Q.., <think>, z_1..z_n, </think>, Answer..]`.
pub fn stage2_layout(question_len: usize, n_slots: usize, answer_len: usize) -> SequenceLayout {
    let mut roles = Vec::new();
    roles.extend((0..question_len).map(|_| Role::Question));
    roles.push(Role::ThinkOpen);
    roles.extend((1..=n_slots).map(|seg| Role::LatentSlot { seg }));
    roles.push(Role::ThinkClose);
    roles.extend((0..answer_len).map(|off| Role::Answer { off }));
    SequenceLayout::new(roles)
}

/// Split a chain into fixed-length segments: ⌈len/r⌉ segments, the first
/// N−1 of length exactly `r`, the last between 1 and `r`. Concatenation
/// reproduces the input.
pub fn segment_fixed(chain: &[u32], r: usize) -> Result<Vec<Vec<u32>>> {
    if chain.is_empty() {
        return Err(Error::invalid("cannot segment an empty chain"));
    }
    if r < 1 {
        return Err(Error::invalid("segment length must be at least 1"));
    }
    Ok(chain.chunks(r).map(|c| c.to_vec()).collect())
}

fn validate_encoder_layout(layout: &SequenceLayout) -> Result<usize> {
    let mut next_slot = 1usize;
    let mut seen_think = false;
    for (pos, role) in layout.roles().iter().enumerate() {
        match *role {
            Role::Question => {
                if seen_think {
                    return Err(Error::invalid("question token after <think>"));
                }
            }
            Role::ThinkOpen => {
                if seen_think {
                    return Err(Error::invalid("duplicate <think>"));
                }
                seen_think = true;
            }
            Role::Explicit { seg, .. } => {
                if !seen_think || seg != next_slot {
                    return Err(Error::invalid(format!(
                        "explicit segment {seg} out of order at position {pos}"
                    )));
                }
            }
            Role::LatentSlot { seg } => {
                if !seen_think || seg != next_slot {
                    return Err(Error::invalid(format!(
                        "latent slot {seg} out of order at position {pos}"
                    )));
                }
                next_slot += 1;
            }
            Role::ThinkClose | Role::Answer { .. } => {
                return Err(Error::invalid("encoder layout must not contain </think> or answer"));
            }
        }
    }
    if !seen_think && next_slot > 1 {
        return Err(Error::invalid("encoder layout with slots needs <think>"));
    }
    Ok(next_slot - 1)
}

/// Latent-token induction mask over an encoder layout.
///
/// Question/<think>/explicit tokens follow causal attention among themselves
/// and never attend to any latent slot. Slot `L_i` attends to the question,
/// <think>, every token of `S_1..S_i`, and itself — never to another slot.
pub fn build_ltim(layout: &SequenceLayout) -> Result<AttentionMask> {
    validate_encoder_layout(layout)?;
    let len = layout.len();
    let mut allow = vec![false; len * len];
    for i in 0..len {
        allow[i * len + i] = true;
        for j in 0..i {
            let ok = match (layout.role(i), layout.role(j)) {
                (_, Role::LatentSlot { .. }) => false,
                (Role::LatentSlot { seg }, Role::Explicit { seg: s, .. }) => s <= seg,
                (Role::LatentSlot { .. }, _) => true,
                (_, _) => true,
            };
            allow[i * len + j] = ok;
        }
    }
    AttentionMask::new(allow, len)
}

fn validate_decoder_layout(layout: &SequenceLayout) -> Result<usize> {
    let n = layout.slot_count();
    if n == 0 {
        return Err(Error::invalid("decoder layout needs at least one latent slot"));
    }
    for seg in 1..=n {
        if layout.slot_position(seg).is_none() {
            return Err(Error::invalid(format!("decoder layout missing slot {seg}")));
        }
    }
    Ok(n)
}

/// Latent-token supervision mask for conditioning step `i` (1-based).
///
/// Tokens of the supervised suffix `Y_i = [S_{i+1}, ..., S_N, </think>,
/// Answer]` attend to the question, <think>, `z_1..z_i`, and causally to
/// earlier `Y_i` tokens; they are blocked from `z_{i+1}..z_N` and from all
/// explicit segments `S_{≤i}`. Slot `z_j` attends to the question, <think>,
/// `z_1..z_{j−1}` and itself only. Rows of positions nothing attends to
/// (the blocked `S_{≤i}` tokens) follow the same latent-only rule so the
/// mask stays deterministic.
pub fn build_ltsum(layout: &SequenceLayout, i: usize) -> Result<AttentionMask> {
    let n = validate_decoder_layout(layout)?;
    if i < 1 || i > n {
        return Err(Error::invalid(format!("conditioning step {i} out of range [1, {n}]")));
    }
    let len = layout.len();
    let mut allow = vec![false; len * len];
    for t in 0..len {
        allow[t * len + t] = true;
        for j in 0..t {
            let ok = match layout.role(t) {
                Role::Question | Role::ThinkOpen => {
                    matches!(layout.role(j), Role::Question | Role::ThinkOpen)
                }
                Role::LatentSlot { seg } => match layout.role(j) {
                    Role::Question | Role::ThinkOpen => true,
                    Role::LatentSlot { seg: s } => s < seg,
                    _ => false,
                },
                Role::Explicit { seg, .. } if seg <= i => match layout.role(j) {
                    Role::Question | Role::ThinkOpen => true,
                    Role::LatentSlot { seg: s } => s < seg,
                    _ => false,
                },
                // Members of Y_i: suffix segments, </think>, answer.
                _ => match layout.role(j) {
                    Role::Question | Role::ThinkOpen => true,
                    Role::LatentSlot { seg: s } => s <= i,
                    Role::Explicit { seg: s, .. } => s > i,
                    Role::ThinkClose | Role::Answer { .. } => true,
                },
            };
            allow[t * len + j] = ok;
        }
    }
    AttentionMask::new(allow, len)
}

/// Plain lower-triangular causal mask.
pub fn causal_mask(len: usize) -> AttentionMask {
    let mut allow = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            allow[i * len + j] = true;
        }
    }
    AttentionMask { allow, len }
}

/// Ablation variant: the plain causal mask over the same layout, used when
/// either specialized mask is disabled.
pub fn mask_ablation_variant(layout: &SequenceLayout) -> AttentionMask {
    causal_mask(layout.len())
}

/// Prediction pairs `(predicting position, target position)` for
/// conditioning step `i` over a stage-1 decoder layout.
///
/// Targets are the tokens of `Y_i`; each is predicted from the previous
/// position visible at step `i` (skipping blocked explicit segments and
/// future slots), so the first token of `S_{i+1}` is predicted from `z_i`.
pub fn supervision_pairs(layout: &SequenceLayout, i: usize) -> Result<Vec<(usize, usize)>> {
    let n = validate_decoder_layout(layout)?;
    if i < 1 || i > n {
        return Err(Error::invalid(format!("conditioning step {i} out of range [1, {n}]")));
    }
    let visible = |r: Role| match r {
        Role::Question | Role::ThinkOpen | Role::ThinkClose | Role::Answer { .. } => true,
        Role::LatentSlot { seg } => seg <= i,
        Role::Explicit { seg, .. } => seg > i,
    };
    let is_target = |r: Role| match r {
        Role::Explicit { seg, .. } => seg > i,
        Role::ThinkClose | Role::Answer { .. } => true,
        _ => false,
    };
    let mut pairs = Vec::new();
    let mut last_visible: Option<usize> = None;
    for pos in 0..layout.len() {
        let role = layout.role(pos);
        if is_target(role) {
            let pred = last_visible.ok_or_else(|| Error::invalid("target with no predecessor"))?;
            pairs.push((pred, pos));
        }
        if visible(role) {
            last_visible = Some(pos);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles_of(mask: &AttentionMask, layout: &SequenceLayout, row: usize) -> Vec<usize> {
        let _ = layout;
        mask.row_allowed(row)
    }

    #[test]
    fn segment_fixed_examples() {
        let chain: Vec<u32> = (0..7).collect();
        let segs = segment_fixed(&chain, 3).unwrap();
        assert_eq!(segs.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 3, 1]);

        let chain4: Vec<u32> = (0..4).collect();
        assert_eq!(segment_fixed(&chain4, 1).unwrap().len(), 4);
        assert_eq!(segment_fixed(&chain4, 4).unwrap().len(), 1);
        assert!(segment_fixed(&[], 2).is_err());
    }

    #[test]
    fn segment_roundtrip_exhaustive() {
        for len in 1..=64usize {
            let chain: Vec<u32> = (0..len as u32).collect();
            for r in 1..=8usize {
                let segs = segment_fixed(&chain, r).unwrap();
                assert_eq!(segs.len(), len.div_ceil(r));
                for (k, s) in segs.iter().enumerate() {
                    if k + 1 < segs.len() {
                        assert_eq!(s.len(), r);
                    } else {
                        assert!(!s.is_empty() && s.len() <= r);
                    }
                }
                let flat: Vec<u32> = segs.concat();
                assert_eq!(flat, chain);
            }
        }
    }

    // Encoder layout [q, think, s11, s12, L1, s21, L2]: positions 0..=6.
    fn two_seg_layout() -> SequenceLayout {
        encoder_layout(1, &[2, 1])
    }

    #[test]
    fn ltim_rows_match_hand_enumeration() {
        let layout = two_seg_layout();
        let mask = build_ltim(&layout).unwrap();
        // Row for L2 (position 6) allows {q, think, s11, s12, s21, self}, blocks L1 (4).
        assert_eq!(roles_of(&mask, &layout, 6), vec![0, 1, 2, 3, 5, 6]);
        // Row for s21 (position 5) allows {q, think, s11, s12, self}, blocks L1.
        assert_eq!(roles_of(&mask, &layout, 5), vec![0, 1, 2, 3, 5]);
    }

    #[test]
    fn ltim_single_slot_degenerate_is_causal() {
        // [q, think, s11, L1]: row for L1 equals the causal row.
        let layout = encoder_layout(1, &[1]);
        let mask = build_ltim(&layout).unwrap();
        assert_eq!(mask.row_allowed(3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ltim_rejects_malformed_layouts() {
        let bad = SequenceLayout::new(vec![Role::Question, Role::Answer { off: 0 }]);
        assert!(build_ltim(&bad).is_err());
        let out_of_order = SequenceLayout::new(vec![
            Role::ThinkOpen,
            Role::LatentSlot { seg: 2 },
        ]);
        assert!(build_ltim(&out_of_order).is_err());
    }

    #[test]
    fn ltim_monotone_slot_visibility() {
        let layout = encoder_layout(2, &[2, 3, 1]);
        let mask = build_ltim(&layout).unwrap();
        let slot_positions: Vec<usize> =
            layout.positions(|r| matches!(r, Role::LatentSlot { .. }));
        for w in slot_positions.windows(2) {
            let prev: Vec<usize> = mask
                .row_allowed(w[0])
                .into_iter()
                .filter(|&j| !matches!(layout.role(j), Role::LatentSlot { .. }))
                .collect();
            let next: Vec<usize> = mask.row_allowed(w[1]).into_iter().collect();
            for p in &prev {
                assert!(next.contains(p), "slot visibility must grow with the chain");
            }
            assert!(next.len() > prev.len());
        }
    }

    // Stage-1 decoder layout for N=2: [q, think, z1, s21, z2, close, a1]
    fn two_seg_decoder() -> SequenceLayout {
        stage1_decoder_layout(1, &[2, 1], 1)
    }

    #[test]
    fn ltsum_rows_match_hand_enumeration() {
        let layout = two_seg_decoder();
        assert_eq!(layout.len(), 7);
        // i=1: S_2's first token (pos 3) attends {q, think, z1, self}; blocked from z2.
        let m1 = build_ltsum(&layout, 1).unwrap();
        assert_eq!(m1.row_allowed(3), vec![0, 1, 2, 3]);
        // i=N=2: answer token attends {q, think, z1, z2, close, self}; blocks s21.
        let m2 = build_ltsum(&layout, 2).unwrap();
        assert_eq!(m2.row_allowed(6), vec![0, 1, 2, 4, 5, 6]);
        // z2 row (pos 4) allows {q, think, z1, self}; blocks every explicit token.
        assert_eq!(m2.row_allowed(4), vec![0, 1, 2, 4]);
        assert_eq!(m1.row_allowed(4), vec![0, 1, 2, 4]);
        // Out-of-range conditioning step.
        assert!(build_ltsum(&layout, 0).is_err());
        assert!(build_ltsum(&layout, 3).is_err());
    }

    #[test]
    fn ltsum_isolation_invariant() {
        let layout = stage1_decoder_layout(2, &[2, 2, 2], 2);
        for i in 1..=3 {
            let mask = build_ltsum(&layout, i).unwrap();
            for t in 0..layout.len() {
                let is_y = match layout.role(t) {
                    Role::Explicit { seg, .. } => seg > i,
                    Role::ThinkClose | Role::Answer { .. } => true,
                    _ => false,
                };
                if !is_y {
                    continue;
                }
                let slots: Vec<usize> = mask
                    .row_allowed(t)
                    .into_iter()
                    .filter_map(|j| match layout.role(j) {
                        Role::LatentSlot { seg } => Some(seg),
                        _ => None,
                    })
                    .collect();
                assert_eq!(slots, (1..=i).collect::<Vec<_>>(), "row {t} at step {i}");
            }
        }
    }

    #[test]
    fn supervision_pairs_skip_invisible_positions() {
        // [q, think, z1, s21, z2, close, a1], i=1:
        // targets s21(3), close(5), a1(6); s21 predicted from z1(2),
        // close from s21(3) since z2 is invisible at i=1, a1 from close(5).
        let layout = two_seg_decoder();
        let pairs = supervision_pairs(&layout, 1).unwrap();
        assert_eq!(pairs, vec![(2, 3), (3, 5), (5, 6)]);
        // i=2: targets close(5) from z2(4), a1(6) from close(5).
        let pairs2 = supervision_pairs(&layout, 2).unwrap();
        assert_eq!(pairs2, vec![(4, 5), (5, 6)]);
    }

    #[test]
    fn ablation_mask_is_triangular() {
        let layout = two_seg_decoder();
        let mask = mask_ablation_variant(&layout);
        let l = layout.len();
        assert_eq!(mask.count_allowed(), l * (l + 1) / 2);
    }

    #[test]
    fn ablation_equals_ltim_without_slots() {
        let mut roles = vec![Role::Question, Role::Question, Role::ThinkOpen];
        roles.extend((0..3).map(|off| Role::Explicit { seg: 1, off }));
        let layout = SequenceLayout::new(roles);
        let ltim = build_ltim(&layout).unwrap();
        assert_eq!(ltim, mask_ablation_variant(&layout));
    }

    #[test]
    fn ltim_vs_causal_differences_touch_slots_only() {
        // Set-difference oracle: every pair where the induction mask and the
        // causal mask disagree involves a latent-slot row or column.
        let layout = encoder_layout(2, &[2, 2]);
        let ltim = build_ltim(&layout).unwrap();
        let causal = causal_mask(layout.len());
        let slots: Vec<usize> = layout.positions(|r| matches!(r, Role::LatentSlot { .. }));
        let mut diff = Vec::new();
        for i in 0..layout.len() {
            for j in 0..layout.len() {
                if ltim.allows(i, j) != causal.allows(i, j) {
                    diff.push((i, j));
                }
            }
        }
        assert!(!diff.is_empty());
        for (i, j) in diff {
            assert!(
                slots.contains(&i) || slots.contains(&j),
                "difference {i},{j} away from slots {slots:?}"
            );
        }
    }

    #[test]
    fn masks_satisfy_invariants() {
        let enc = encoder_layout(3, &[2, 2, 1]);
        let dec = stage1_decoder_layout(3, &[2, 2, 1], 2);
        let mut masks = vec![build_ltim(&enc).unwrap(), causal_mask(9)];
        for i in 1..=3 {
            masks.push(build_ltsum(&dec, i).unwrap());
        }
        for m in masks {
            for i in 0..m.len() {
                assert!(m.allows(i, i));
                for j in (i + 1)..m.len() {
                    assert!(!m.allows(i, j));
                }
            }
        }
    }

    #[test]
    fn bitpacked_roundtrip_and_golden() {
        let layout = encoder_layout(1, &[1]);
        let mask = build_ltim(&layout).unwrap();
        let packed = mask.to_bitpacked();
        // 4x4 causal-with-slot mask rows: 1000 1100 1110 1111 -> bits
        // index 0,4,5,8,9,10,12,13,14,15 set.
        assert_eq!(packed, vec![0b0011_0001, 0b1111_0111]);
        let back = AttentionMask::from_bitpacked(&packed, 4).unwrap();
        assert_eq!(back, mask);
    }
}
