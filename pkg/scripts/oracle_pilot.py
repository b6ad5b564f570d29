"""Pilot runs behind the frozen thresholds in the test suite.

Trains a logistic-regression oracle on the synthetic generator and measures the PGD-AT
gain, printing the numbers the tests compare against.

    python3 scripts/oracle_pilot.py [--seed 7]
"""

import argparse

from sklearn.linear_model import LogisticRegression

from dynamite.attacks import pgd
from dynamite.data import CleaningSpec, SynthSpec, prepare, synth_generate
from dynamite.defenses import DefenseConfig, DefenseKind, defended_predict, train_defense
from dynamite.metrics import macro_f1
from dynamite.nn import TrainConfig, init_mlp, predict, train


def logistic_accuracy(spec, seed):
    _, tr, te = prepare(synth_generate(spec), CleaningSpec(), 0.3, seed)
    clf = LogisticRegression(max_iter=2000).fit(tr.features, tr.labels)
    return clf.score(tr.features, tr.labels), clf.score(te.features, te.labels)


def pgd_at_gain(spec, seed, eps):
    state, tr, te = prepare(synth_generate(spec), CleaningSpec(), 0.3, seed)
    b = (state.lo, state.hi)
    base, _ = train(init_mlp([tr.d, 128, 64, 2], seed), tr, TrainConfig(seed=seed))
    dm = train_defense(DefenseKind.PgdAT, DefenseConfig(seed=seed), tr, base, b)
    adv = te.with_features(pgd(base, te.features, te.labels, eps, 10, eps / 4, b, seed))
    clean = macro_f1(defended_predict(dm, te)[0], te.labels, 2)
    nodef = macro_f1(predict(base, adv)[0], adv.labels, 2)
    return clean, nodef, macro_f1(defended_predict(dm, adv)[0], adv.labels, 2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    for sep in (4.0, 0.0):
        tr_acc, te_acc = logistic_accuracy(SynthSpec(n_samples=1000, class_separation=sep, seed=args.seed), args.seed)
        print(f"logistic oracle, separation {sep}: train acc {tr_acc:.4f}, test acc {te_acc:.4f}")
    for decay in (1.0, 0.5, 0.2, 0.1):
        spec = SynthSpec(class_separation=4.0, signal_decay=decay, seed=args.seed)
        for eps in (0.1, 0.3):
            clean, nodef, robust = pgd_at_gain(spec, args.seed, eps)
            print(f"PGD-AT, decay {decay}, eps {eps}: clean {clean:.4f}, no defense {nodef:.4f}, "
                  f"PGD-AT {robust:.4f}, gain {robust - nodef:+.4f}")


if __name__ == "__main__":
    main()
