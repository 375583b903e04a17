"""Pattern-templated 7-intent toy data with SNIPS-like class names.

Each intent owns a pool of invented slot words.  About half the sentences
use an intent-specific template (often containing the label words); the rest
use templates shared by all intents, so the slot word is the only cue and
unseen slot words must be learned from more data.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, LabeledExample

TOY_CLASSES = ["add_to_playlist", "book_restaurant", "get_weather", "play_music",
               "rate_book", "search_creative_work", "search_screening_event"]

_SPECIFIC = {
    "add_to_playlist": ["add {s} to my playlist", "put {s} on the playlist", "please add {s} to the list",
                        "add the track {s} to my playlist"],
    "book_restaurant": ["book a restaurant called {s}", "reserve a table at {s}", "book a table for two at {s}",
                        "make a restaurant booking at {s}"],
    "get_weather": ["get the weather in {s}", "what is the weather like in {s}", "will it rain in {s} tomorrow",
                    "forecast for {s} this weekend"],
    "play_music": ["play some music by {s}", "play the song {s}", "i want to hear {s}", "play {s} on the speaker"],
    "rate_book": ["rate the book {s} five stars", "give {s} a rating of three", "rate {s} two out of six",
                  "i would rate the novel {s} four"],
    "search_creative_work": ["search for the creative work {s}", "find the album {s}", "look up the show {s}",
                             "search for the work called {s}"],
    "search_screening_event": ["search the screening event times for {s}", "when is {s} showing at the cinema",
                               "find movie schedules for {s}", "what time is {s} playing nearby"],
}

_GENERIC = ["can you do something with {s}", "i need {s} now", "{s} please", "help me with {s}",
            "what about {s}", "tell me about {s} today", "something for {s}", "i was thinking of {s}"]

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


def slot_pools(pool_size: int = 60, seed: int = 1234) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed)
    used: set[str] = set()
    pools: dict[str, list[str]] = {}
    for c in TOY_CLASSES:
        words: list[str] = []
        while len(words) < pool_size:
            n = int(rng.integers(2, 4))
            w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                        for _ in range(n))
            if w not in used:
                used.add(w)
                words.append(w)
        pools[c] = words
    return pools


def _sentence(c: str, rng: np.random.Generator, pools, generic_prob: float) -> str:
    slot = pools[c][rng.integers(len(pools[c]))]
    templates = _GENERIC if rng.random() < generic_prob else _SPECIFIC[c]
    return templates[rng.integers(len(templates))].format(s=slot)


def make_toy_dataset(train_per_class: int = 100, test_per_class: int = 30, seed: int = 0,
                     pool_size: int = 60, generic_prob: float = 0.5) -> Dataset:
    pools = slot_pools(pool_size)
    rng = np.random.default_rng(seed)
    train = [LabeledExample(_sentence(c, rng, pools, generic_prob), c)
             for c in TOY_CLASSES for _ in range(train_per_class)]
    test = [LabeledExample(_sentence(c, rng, pools, generic_prob), c)
            for c in TOY_CLASSES for _ in range(test_per_class)]
    return Dataset("toy-intents", list(TOY_CLASSES), train, test)


def toy_corpus(n_sentences: int = 2000, seed: int = 99, pool_size: int = 60,
               generic_prob: float = 0.5) -> list[str]:
    """Unlabeled sentences from the same distribution, for MLM pretraining."""
    pools = slot_pools(pool_size)
    rng = np.random.default_rng(seed)
    return [_sentence(TOY_CLASSES[rng.integers(len(TOY_CLASSES))], rng, pools, generic_prob)
            for _ in range(n_sentences)]
