#!/usr/bin/env python3
"""Drive the full pipeline on the bundled synthetic fixtures.

Curates the synthetic knowledge graph into probe queries, probes them with
the raw reference encoder, rewires the encoder on the fixture corpus,
probes again from the selected checkpoint, and prints the before/after
retrieval scores. Everything runs locally in a few seconds.
"""

import argparse
from pathlib import Path

import probeforge
from probeforge.cli import main as forge
from probeforge.evaluation import load_report

FIXTURES = Path(probeforge.__file__).parent / "fixtures"
ENCODER = "reference:dim=64,seed=7,layers=2,feature_dim=2048"


def run(argv) -> None:
    code = forge([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


def main() -> int:
    parser = argparse.ArgumentParser(description="run the bundled demo pipeline")
    parser.add_argument("--out", default="demo_out", help="output root directory")
    args = parser.parse_args()
    root = Path(args.out)
    dataset = root / "curated" / "full.jsonl"
    entities = FIXTURES / "entities.txt"

    run(["curate", "--triples", FIXTURES / "triples.tsv", "--seed", "7",
         "--out", root / "curated"])

    run(["probe", "--encoder", ENCODER, "--dataset", dataset,
         "--entities", entities, "--strategy", "contrastive",
         "--out", root / "probe_untrained"])
    run(["eval", "--predictions", root / "probe_untrained" / "predictions.jsonl",
         "--dataset", dataset, "--out", root / "eval_untrained"])

    run(["rewire", "--encoder", ENCODER, "--corpus", FIXTURES / "corpus.txt",
         "--config", FIXTURES / "rewire_demo.json", "--out", root / "rewired"])
    run(["probe", "--checkpoint", root / "rewired", "--dataset", dataset,
         "--entities", entities, "--strategy", "contrastive",
         "--out", root / "probe_rewired"])
    run(["eval", "--predictions", root / "probe_rewired" / "predictions.jsonl",
         "--dataset", dataset, "--out", root / "eval_rewired"])
    run(["eval", "--predictions", root / "probe_rewired" / "predictions.jsonl",
         "--dataset", dataset, "--split", "hard",
         "--out", root / "eval_rewired_hard"])

    before = load_report(root / "eval_untrained" / "report.json")
    after = load_report(root / "eval_rewired" / "report.json")
    print()
    print("contrastive retrieval, full split")
    for label, report in (("untrained", before), ("rewired", after)):
        print(f"  {label:>9}: acc@1 {report.micro[1]:.3f}  "
              f"acc@10 {report.micro[10]:.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
