import numpy as np
import pytest

from revlab.augment import SynonymLexicon
from revlab.corpus import Label, Op, Revision
from revlab.neural import EmbeddingTable


@pytest.fixture
def lexicon():
    return SynonymLexicon.from_pairs({
        "cat": ["feline", "kitty"],
        "dog": ["hound", "pup"],
        "good": ["fine", "solid"],
        "point": ["claim"],
        "the": ["that"],
    })


@pytest.fixture
def tiny_table():
    rng = np.random.default_rng(42)
    tokens = ["the", "cat", "sat", "dog", "good", "point", "a", "b", "c", "d"]
    vectors = {}
    for tok in tokens:
        vec = rng.standard_normal(4)
        vectors[tok] = vec / np.linalg.norm(vec)
    return EmbeddingTable.build(4, vectors)


def make_revision(rev_id="r1", essay_id="e1", op=Op.MODIFY,
                  text_a="the cat sat", text_b="the dog sat",
                  label=Label.DESIRABLE, purpose="reasoning", augmented_from=None):
    return Revision(revision_id=rev_id, essay_id=essay_id, op=op,
                    text_a=text_a, text_b=text_b, purpose=purpose,
                    label=label, augmented_from=augmented_from)


@pytest.fixture
def revision_factory():
    return make_revision
