"""Serialized trained policies.

A policy artifact is a self-describing JSON file: network parameters,
the encoder fingerprint they were trained against, the action catalog
order they index into, and the config that produced them. Evaluation,
A/B comparison, and the chat service all load policies through this
module and refuse artifacts whose encoder fingerprint does not match
the active encoder.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dialogue import EncoderConfig
from .errors import DataError, FingerprintMismatchError
from .hashing import sha256_digest
from .nn import Mlp, masked_softmax

FORMAT_VERSION = 1


@dataclass
class PolicyArtifact:
    algo: str
    encoder: EncoderConfig
    catalog_ids: tuple[str, ...]
    networks: dict[str, Mlp]
    config: dict
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_actions(self) -> int:
        return len(self.catalog_ids)

    @property
    def config_digest(self) -> str:
        return sha256_digest(
            {
                "algo": self.algo,
                "config": self.config,
                "encoder": {"dimension": self.encoder.dimension, "version": self.encoder.version},
                "catalog_ids": list(self.catalog_ids),
                "seed": self.seed,
            }
        )

    def scoring_net(self) -> Mlp:
        """Network whose outputs rank actions: Q-values or policy logits."""
        key = "q" if "q" in self.networks else "policy"
        return self.networks[key]

    def action_scores(self, enc_values: np.ndarray) -> np.ndarray:
        from .nn import forward

        out, _ = forward(self.scoring_net(), enc_values)
        return out

    def greedy_action(self, enc_values: np.ndarray, allowed: tuple[int, ...]) -> int:
        """Argmax over allowed actions; ties break to the lowest index."""
        scores = self.action_scores(enc_values)
        masked = np.full(self.n_actions, -np.inf)
        masked[list(allowed)] = scores[list(allowed)]
        return int(np.argmax(masked))

    def action_probabilities(self, enc_values: np.ndarray, allowed: tuple[int, ...]) -> np.ndarray:
        """Masked softmax over action scores (policy probabilities for
        policy-gradient artifacts, a smooth preference for Q artifacts)."""
        scores = self.action_scores(enc_values)
        mask = np.zeros(self.n_actions, dtype=bool)
        mask[list(allowed)] = True
        return masked_softmax(scores, mask)

    def check_fingerprint(self, encoder: EncoderConfig) -> None:
        if encoder.fingerprint != self.encoder.fingerprint:
            raise FingerprintMismatchError(
                f"artifact was trained with encoder fingerprint "
                f"{self.encoder.fingerprint}, active config has {encoder.fingerprint}"
            )

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "algo": self.algo,
            "encoder": {
                "dimension": self.encoder.dimension,
                "version": self.encoder.version,
                "fingerprint": self.encoder.fingerprint,
            },
            "catalog_ids": list(self.catalog_ids),
            "networks": {name: net.to_dict() for name, net in sorted(self.networks.items())},
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "meta": self.meta,
        }

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, payload: dict) -> "PolicyArtifact":
        try:
            if payload["format_version"] != FORMAT_VERSION:
                raise DataError(f"unsupported artifact format {payload['format_version']}")
            enc = payload["encoder"]
            artifact = cls(
                algo=str(payload["algo"]),
                encoder=EncoderConfig(dimension=int(enc["dimension"]), version=str(enc["version"])),
                catalog_ids=tuple(payload["catalog_ids"]),
                networks={name: Mlp.from_dict(d) for name, d in payload["networks"].items()},
                config=payload["config"],
                seed=int(payload["seed"]),
                meta=payload.get("meta", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed policy artifact: {exc}") from exc
        if artifact.encoder.fingerprint != enc["fingerprint"]:
            raise DataError("artifact encoder fingerprint does not match its own config")
        return artifact

    @classmethod
    def load(cls, path: str) -> "PolicyArtifact":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read artifact {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"artifact {path} is not valid JSON: {exc}") from exc
        return cls.from_json(payload)


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
