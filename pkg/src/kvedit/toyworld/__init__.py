from .metrics import (
    GLYPH_SCORE_THRESHOLD,
    NO_OBJECT,
    identity_features,
    identity_preserved,
    identity_score,
    pose_classify,
    pose_scores,
    psnr,
)
from .world import (
    COLORS,
    NULL_PROMPT,
    POSES,
    TEXTURES,
    VOCAB,
    PromptError,
    PromptTokens,
    Sample,
    SceneSpec,
    gen_dataset,
    parse_prompt,
    render_scene,
    sample_scene,
    tokens_for,
)
