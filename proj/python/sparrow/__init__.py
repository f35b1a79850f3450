# Copyright 2026 The Sparrow Authors
# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the sparrow speculative decoding library."""

from ._sparrow import (
    DraftModel,
    ModelConfig,
    Prompt,
    TargetModel,
    TokenSequence,
    TreeConfig,
    decode,
    eos_token,
    grounded_accuracy,
    grounded_prompts,
    pretrain_target,
    speedups,
    train_draft,
    vanilla_decode,
)

__all__ = [
    "DraftModel",
    "ModelConfig",
    "Prompt",
    "TargetModel",
    "TokenSequence",
    "TreeConfig",
    "decode",
    "eos_token",
    "grounded_accuracy",
    "grounded_prompts",
    "pretrain_target",
    "speedups",
    "train_draft",
    "vanilla_decode",
]
