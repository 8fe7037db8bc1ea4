from ._lantree import (
    DataTree,
    GptTree,
    LantreeError,
    Tokenizer,
    compare,
    cooccur,
    evaluate_question,
    flatten_http,
    flatten_oracle,
    gen_arithmetic_qa,
    mle_verify,
    perturb_last_token,
    sankey,
    sankey_html,
)

__all__ = [
    "DataTree",
    "GptTree",
    "LantreeError",
    "Tokenizer",
    "compare",
    "cooccur",
    "evaluate_question",
    "flatten_http",
    "flatten_oracle",
    "gen_arithmetic_qa",
    "mle_verify",
    "perturb_last_token",
    "sankey",
    "sankey_html",
]
