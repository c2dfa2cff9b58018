"""Generate the bundled synthetic mini dataset (crates/core/data/mini_dataset.csv).

The rows are synthetic: compositions are drawn from ten alloy families with
typical co-elements, and labels/properties come from simple descriptor-based
rules plus noise. The file exists so that every pipeline stage can run offline
on realistic-looking data; it is not experimental data.
"""
import csv
import math
import pathlib

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parents[1]
ELEMENTS_CSV = ROOT / "crates/core/data/elements.csv"
OUT = ROOT / "crates/core/data/mini_dataset.csv"

FAMILIES = {
    "Zr": ((40, 65), ["Cu", "Ni", "Al", "Ti", "Be", "Nb"]),
    "Cu": ((40, 60), ["Zr", "Hf", "Ti", "Al", "Ag", "Y"]),
    "Fe": ((40, 75), ["Co", "Cr", "Mo", "B", "C", "Y", "Si", "P"]),
    "Pd": ((40, 80), ["Cu", "Ni", "P", "Si"]),
    "Mg": ((55, 75), ["Cu", "Y", "Gd", "Ni", "Zn", "Ag"]),
    "La": ((50, 70), ["Al", "Cu", "Ni", "Co"]),
    "Ti": ((35, 55), ["Zr", "Cu", "Ni", "Be", "Sn"]),
    "Ni": ((40, 65), ["Nb", "Ta", "Zr", "Ti", "P", "B"]),
    "Ce": ((55, 70), ["Al", "Cu", "Co", "Ni"]),
    "Co": ((40, 60), ["Fe", "B", "Si", "Ta", "Nb"]),
}
FAMILY_BIAS = {"Zr": 0.6, "Pd": 0.7, "Cu": 0.3, "Mg": 0.1, "La": 0.2, "Fe": -0.1,
               "Ti": 0.0, "Ni": -0.2, "Ce": 0.0, "Co": -0.3}


def main():
    rng = np.random.default_rng(20240611)
    with ELEMENTS_CSV.open() as fh:
        table = {row["symbol"]: {k: float(v) for k, v in row.items() if k != "symbol"}
                 for row in csv.DictReader(fh)}
    symbols = list(table)

    rows = []
    families = list(FAMILIES)
    for i in range(200):
        base = families[i % len(families)]
        (lo, hi), partners = FAMILIES[base]
        n_co = int(rng.integers(2, min(5, len(partners)) + 1))
        co = list(rng.choice(partners, size=n_co, replace=False))
        base_frac = float(rng.uniform(lo, hi))
        split = rng.dirichlet(np.ones(n_co) * 1.5) * (100.0 - base_frac)
        comp = {base: base_frac}
        for el, frac in zip(co, split):
            comp[el] = max(float(frac), 0.5)
        total = sum(comp.values())
        comp = {el: round(100.0 * v / total, 2) for el, v in comp.items()}
        comp[base] = round(comp[base] + 100.0 - sum(comp.values()), 2)

        x = {el: v / 100.0 for el, v in comp.items()}

        def wmean(key):
            return sum(x[el] * table[el][key] for el in x)

        def wstd(key):
            m = wmean(key)
            return math.sqrt(sum(x[el] * (table[el][key] - m) ** 2 for el in x))

        r_bar = wmean("atomic_radius")
        delta = math.sqrt(sum(x[el] * (1 - table[el]["atomic_radius"] / r_bar) ** 2 for el in x))
        en_spread = wstd("electronegativity")
        score = (12.0 * delta + 0.25 * len(comp) + 1.2 * en_spread + FAMILY_BIAS[base]
                 - 2.9 + float(rng.normal(0, 0.35)))
        label = "BMG" if score > 0.45 else ("RMG" if score > -0.35 else "CRA")

        tm = wmean("melting_point")
        tg = 0.42 * tm + 120.0 + float(rng.normal(0, 25))
        trg = min(0.68, max(0.48, 0.56 + 0.05 * score + float(rng.normal(0, 0.015))))
        tl = tg / trg
        tx = tg + max(10.0, 45.0 + 25.0 * score + float(rng.normal(0, 8)))
        e_mod = 0.07 * tm - 10.0 + 3.0 * wmean("density") + float(rng.normal(0, 6))
        sigma = 20.0 * e_mod + float(rng.normal(0, 120))
        dmax = math.exp(1.1 * score + 0.8 + float(rng.normal(0, 0.3))) if label == "BMG" else \
            float(rng.uniform(0.05, 0.9))
        elong = max(0.0, 18.0 * wstd("valence_electrons") / 4.0 - 3.0 + float(rng.normal(0, 1.5)))

        props = {}
        if label == "BMG" or rng.random() < 0.25:
            props["Dmax"] = round(dmax, 2)
        if rng.random() < 0.8:
            props["Tg"] = round(tg, 1)
            props["Tl"] = round(tl, 1)
            props["Tx"] = round(tx, 1)
        if rng.random() < 0.5:
            props["E"] = round(max(e_mod, 10.0), 1)
            props["sigma_Y"] = round(max(sigma, 100.0), 1)
            props["epsilon"] = round(elong, 2)
        rows.append((comp, props, label))

    header = symbols + ["Dmax", "Tg", "Tl", "Tx", "sigma_Y", "E", "epsilon", "label"]
    with OUT.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for comp, props, label in rows:
            w.writerow([f"{comp.get(s, 0.0):.2f}" if s in comp else "0" for s in symbols]
                       + [props.get(p, "") for p in header[52:59]] + [label])
    counts = {c: sum(1 for r in rows if r[2] == c) for c in ("BMG", "RMG", "CRA")}
    print(OUT, counts)


if __name__ == "__main__":
    main()
