import json
import random
from pathlib import Path

import pytest

from rahore.corpus import Corpus, Document, Query

FIXTURES = Path(__file__).parent / "fixtures"

STRATEGIES = [
    "Question",
    "Restatement or Paraphrasing",
    "Reflection of feelings",
    "Information",
    "Self-disclosure",
    "Affirmation and Reassurance",
    "Providing Suggestions",
    "Others",
]

UTTERANCES = [
    "I lost my job last week.",
    "My friends stopped calling me.",
    "I can't sleep at night anymore.",
    "Seriously! What I am scare of now is how to secure another job.",
    "I feel like nobody understands me.",
    "My exams are coming and I am so anxious.",
]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def example_corpus() -> Corpus:
    return Corpus.from_jsonl(FIXTURES / "example_corpus.jsonl")


@pytest.fixture
def example_query() -> Query:
    return Query(
        id="example-1",
        utterance="Seriously! What I am scare of now is how to secure another job.",
        gold_doc_ids=frozenset({"reflection_of_feelings"}),
    )


def make_queries(corpus_ids, n_queries, seed=0, max_history=3):
    rng = random.Random(seed)
    queries = []
    for i in range(n_queries):
        history = []
        for j in range(rng.randrange(max_history + 1)):
            role = "assistant" if j % 2 else "user"
            history.append([role, rng.choice(UTTERANCES)])
        queries.append(
            {
                "id": f"q{i:03d}",
                "history": history,
                "utterance": rng.choice(UTTERANCES),
                "gold": [rng.choice(corpus_ids)],
            }
        )
    return queries


def write_dataset(directory: Path, n_queries: int, seed: int = 0, strategies=STRATEGIES):
    """Write an ESConv-shaped corpus/queries pair; returns the two paths."""
    corpus_path = directory / "corpus.jsonl"
    queries_path = directory / "queries.jsonl"
    ids = [s.lower().replace(" ", "_").replace("-", "_") for s in strategies]
    with open(corpus_path, "w") as f:
        for i, s in zip(ids, strategies):
            f.write(json.dumps({"id": i, "text": s}) + "\n")
    with open(queries_path, "w") as f:
        for q in make_queries(ids, n_queries, seed):
            f.write(json.dumps(q) + "\n")
    return corpus_path, queries_path


@pytest.fixture
def dataset_paths(tmp_path):
    return write_dataset(tmp_path, 100)


@pytest.fixture
def small_corpus():
    return Corpus([Document(f"d{i}", f"strategy number {i} with some words") for i in range(5)])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
