"""Shared fixtures: a synthetic bilingual world with a distinct in-domain
distribution.

Source sentences use words sa..sj.  "In-domain" (A) pairs translate word
i to ta..tj; "general-domain" (B) pairs translate the same source words
to ua..uj instead.  The two target vocabularies are disjoint, so the
in-domain language model separates A from B cleanly, and the conflicting
mappings make fine-tuning on the selected subset measurably better on an
in-domain test set."""

import configparser
from dataclasses import dataclass

import numpy as np
import pytest

S_WORDS = [f"s{c}" for c in "abcdefghij"]
A_MAP = {f"s{c}": f"t{c}" for c in "abcdefghij"}
B_MAP = {f"s{c}": f"u{c}" for c in "abcdefghij"}


@dataclass
class ToyWorld:
    general_src: list[str]
    general_trg: list[str]
    a_indices: set[int]          # positions of in-domain-like pairs
    dev_src: list[str]
    dev_trg: list[str]


def make_toy_world(n_general=200, n_a=60, n_dev=48, seed=7,
                   min_len=5, max_len=9) -> ToyWorld:
    rng = np.random.default_rng(seed)
    seen = set()

    def sentence():
        while True:
            length = int(rng.integers(min_len, max_len + 1))
            words = tuple(S_WORDS[i] for i in rng.integers(0, len(S_WORDS),
                                                           size=length))
            if words not in seen:
                seen.add(words)
                return list(words)

    a_indices = set(int(i) for i in
                    rng.choice(n_general, size=n_a, replace=False))
    general_src, general_trg = [], []
    for i in range(n_general):
        words = sentence()
        mapping = A_MAP if i in a_indices else B_MAP
        general_src.append(" ".join(words) + " .")
        general_trg.append(" ".join(mapping[w] for w in words) + " .")

    dev_src, dev_trg = [], []
    for _ in range(n_dev):
        words = sentence()
        dev_src.append(" ".join(words) + " .")
        dev_trg.append(" ".join(A_MAP[w] for w in words) + " .")
    return ToyWorld(general_src, general_trg, a_indices, dev_src, dev_trg)


def write_world(world: ToyWorld, directory) -> dict:
    paths = {
        "general_source": str(directory / "general.src"),
        "general_target": str(directory / "general.trg"),
        "indomain_source": str(directory / "dev.src"),
        "indomain_target": str(directory / "dev.trg"),
    }
    contents = (world.general_src, world.general_trg,
                world.dev_src, world.dev_trg)
    for path, lines in zip(paths.values(), contents):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line + "\n")
    return paths


TOY_PIPELINE_SETTINGS = {
    "clean": {"min_tokens": "1", "max_tokens": "100", "max_ratio": "3.0"},
    "lm": {"order": "3"},
    "select": {"n_validation": "8", "n_select": "60"},
    "bpe": {"vocab_size": "90"},
    "model": {"d_model": "32", "d_ff": "64", "heads": "2", "layers": "1",
              "dropout": "0.1", "max_positions": "32",
              "word_vocab_size": "50"},
    "train": {"epochs": "8", "batch_tokens": "640", "max_len": "30",
              "warmup_steps": "40", "label_smoothing": "0.1",
              "checkpoint_keep": "4"},
    "finetune": {"epochs": "6"},
    "decode": {"beam": "4", "max_len": "24", "length_alpha": "1.0"},
    "pipeline": {"seed": "11"},
}


def write_pipeline_ini(path, data_paths: dict, workdir: str,
                       overrides: dict | None = None) -> str:
    parser = configparser.ConfigParser()
    parser["data"] = dict(data_paths, workdir=workdir)
    for section, values in TOY_PIPELINE_SETTINGS.items():
        parser[section] = dict(values)
    if overrides:
        for section, values in overrides.items():
            if not parser.has_section(section):
                parser[section] = {}
            for key, value in values.items():
                parser[section][key] = str(value)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return str(path)


@pytest.fixture(scope="session")
def toy_world():
    return make_toy_world()


@pytest.fixture()
def toy_files(toy_world, tmp_path):
    return write_world(toy_world, tmp_path)
