#!/usr/bin/env python3
"""Independent reference computation of the corpus metrics.

Reimplements the documented tokenizer and metric definitions from scratch
(no shared code with the Rust implementation) so fixture values in the
test suite can be cross-checked:

    tokenizer: lowercase, split on whitespace, strip leading/trailing
               non-alphanumeric characters, drop empty tokens
    ttr (per-sample mean): mean over samples of unique/total tokens
    ttr (corpus level):    global unique/total
    entropy:               -sum p ln p over the corpus unigram
                           distribution, in nats
    lengths:               token counts per sample; histogram buckets of
                           width 25 starting at 0

Usage: python3 tools/metrics_oracle.py <corpus.jsonl>
The input is one JSON object per line with a "text" field.
"""

import json
import math
import sys
from collections import Counter


def tokens(text: str):
    out = []
    for raw in text.split():
        t = raw.strip()
        # strip leading/trailing non-alphanumeric
        start = 0
        end = len(t)
        while start < end and not t[start].isalnum():
            start += 1
        while end > start and not t[end - 1].isalnum():
            end -= 1
        t = t[start:end]
        if t:
            out.append(t.lower())
    return out


def main(path: str) -> None:
    texts = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                texts.append(json.loads(line)["text"])

    counts = Counter()
    per_sample_ttr = []
    lengths = []
    for text in texts:
        toks = tokens(text)
        lengths.append(len(toks))
        if toks:
            per_sample_ttr.append(len(set(toks)) / len(toks))
        counts.update(toks)

    total = sum(counts.values())
    entropy_nats = -sum(
        (c / total) * math.log(c / total) for _, c in sorted(counts.items())
    )
    report = {
        "sample_count": len(texts),
        "ttr_per_sample_mean": sum(per_sample_ttr) / len(texts),
        "ttr_corpus_level": len(counts) / total,
        "entropy_nats": entropy_nats,
        "entropy_bits": entropy_nats / math.log(2),
        "length_min": min(lengths),
        "length_max": max(lengths),
        "length_mean": sum(lengths) / len(lengths),
        "total_tokens": total,
        "vocabulary": len(counts),
    }
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main(sys.argv[1])
