"""Compose demonstration sequences for unseen queries and race the baselines.

This picks up where the training demo stops: a trained composer decodes a
demonstration sequence per test query (greedy or beam, repeats masked out),
and the oracle grades the result against random selection and the
similarity retrievers. The query-free variant is also shown: decode once
from a zero query and reuse that single sequence everywhere.

Run:  python3 demos/04_generation_and_baselines.py   (about 10 seconds)
"""

from icdlm import (
    BaselineKind,
    DecodeConfig,
    GoldenMethod,
    SupportFeatures,
    baseline_method,
    build_dataset,
    composer_method,
    evaluate_method,
    generate,
    golden_extract,
    golden_method,
    sample_examples,
    split_anchor_set,
    train,
    world_generate,
)
from icdlm.records import ConstructionConfig, ModelConfig, TrainingConfig


def main():
    world = world_generate(t=4, c=3, f=8, sigma=0.9, gamma=0.85, seed=3)
    pool = sample_examples(world, 280, seed=[3, 1])
    queries = sample_examples(world, 60, seed=[3, 2])
    anchors, support = split_anchor_set(pool, n=120, seed=[3, 0])
    records = build_dataset(
        world, anchors, support,
        ConstructionConfig(n_anchors=120, m=24, k=2, b=5, seed=3), threads=4,
    )
    params, _, _ = train(
        ModelConfig(d_model=64, heads=2, layers=2, ffn_mult=2, k_max=4),
        records, anchors, support,
        TrainingConfig(lr=3e-3, epochs=20, batch_size=16, warmup_fraction=0.1, seed=3),
    )
    feats = SupportFeatures.from_examples(support)
    decode = DecodeConfig(mode="beam", width=3)

    q = queries[0]
    seq = generate(params, feats, q, k=2, decode=decode)
    print(f"query {q.id} (task {q.task}, label {q.label[0]}) -> "
          f"ids {seq.icds}, model score {seq.score:.3f}")
    picked = [support[i] for i in seq.icds]
    print("picked demos:", ", ".join(f"id{e.id}/t{e.task}c{e.label[0]}" for e in picked))

    shots = [1, 2, 3]
    print(f"\noracle accuracy on {len(queries)} held-out queries, shots {shots}:")
    contenders = [composer_method(params, feats, decode)]
    for kind in (BaselineKind.RS, BaselineKind.SIIR, BaselineKind.SITR, BaselineKind.STTR):
        contenders.append(baseline_method(kind, support, seed=3))
    contenders.append(golden_method(params, feats, GoldenMethod.NULL_QUERY, decode=decode))
    for method in contenders:
        rep = evaluate_method(world, method, support, queries, shots)
        cells = "  ".join(f"{s}:{rep.accuracy[s]:.3f}" for s in shots)
        print(f"  {method.name:>10}  {cells}")
    print("(3-shot decoding extrapolates past the k=2 training sequences by "
          "suppressing the end marker)")

    gold = golden_extract(params, feats, k=2, decode=decode)
    print(f"\nquery-free golden sequence: ids {gold.icds}, reused for every query above")


if __name__ == "__main__":
    main()
