"""Exact-arithmetic attention blocks, max-min spline compilation to
encoder weights, and verification oracles."""

from .tensor import (FLOAT, NEG_INF, RATIONAL, BackendError,
                     DegenerateColumnError, Mat, MaskedScores, ShapeError,
                     apply_mask, matmul, relu, softmax_columns, softplus_beta,
                     stack_rows)
from .spline import (Monomial, ONE, PBForm, Polynomial, SplineGrid,
                     UnsupportedProductError, eval_maxdef, eval_pbform,
                     eval_poly, normalize_to_pbform)
from .veronese import (VeroneseIndex, compose_cover, factor_pair, factor_split,
                       graded_lex_monomials, veronese_dim, veronese_eval)
from .transformer import (RELU, SOFTMAX, Activation, AttentionHead,
                          DecoderBlock, EncDecStack, EncDecStage, EncoderBlock,
                          EncoderModel, FeedForwardNet, MultiheadAttention,
                          eval_attention, eval_encdec, eval_encdec_attention,
                          eval_encoder, eval_ffn, eval_multihead, softplus)
from .compiler import (CompileOptions, CompiledEncoder, MonomialLayout,
                       NotAutoregressiveError, ResourceLimitError,
                       build_const_head, build_copy_head, build_eps2,
                       build_veronese_encoder, compile_autoregressive,
                       compile_spline, ffn_block_form, ffn_to_encoder_blocks,
                       linear_spline_to_ffn)
from .verifier import (DegreeReport, EquivReport, FnModel, PrefixReport,
                       SmoothModel, autoregressive_check, check_layout_soundness,
                       estimate_degree, oracle_equiv, random_fraction,
                       random_rational_mat, smooth_convergence_table,
                       smooth_swap, softplus_error_bound, trial_rng)

__all__ = [name for name in dir() if not name.startswith("_")]
