"""Scratch calibration driver for the seeded desk experiment (not shipped)."""

import dataclasses
import shutil
import sys
import time

from upmoe.experiments import (
    DEFAULT_CONTINUE,
    DEFAULT_DATA,
    DEFAULT_MODEL,
    DEFAULT_MOE,
    DEFAULT_PRETRAIN,
    ExperimentSettings,
    run_protocol,
)


def run(tag, **kw):
    data_kw = {k[2:]: v for k, v in kw.items() if k.startswith("d_")}
    pre_kw = {k[2:]: v for k, v in kw.items() if k.startswith("p_")}
    con_kw = {k[2:]: v for k, v in kw.items() if k.startswith("c_")}
    moe_kw = {k[2:]: v for k, v in kw.items() if k.startswith("m_")}
    seed = kw.get("seed", 7)
    s = ExperimentSettings(
        seed=seed,
        model=DEFAULT_MODEL,
        moe=dataclasses.replace(DEFAULT_MOE, **moe_kw),
        data=dataclasses.replace(DEFAULT_DATA, **data_kw),
        pretrain=dataclasses.replace(DEFAULT_PRETRAIN, **pre_kw),
        cont=dataclasses.replace(DEFAULT_CONTINUE, **con_kw),
    )
    workdir = f"/tmp/cal_{tag}"
    shutil.rmtree(workdir, ignore_errors=True)
    t0 = time.time()
    out = {}
    for proto in ("PRETRAIN", "FMFT", "UME", "UME_NOFREEZE", "UME_NOBALANCE"):
        r = run_protocol(proto, workdir, s)
        a = r.reports["domain_a"].token_error_rate
        b = r.reports["domain_b"].token_error_rate
        eng = (
            r.reports["combined"].usage.engaged_expert_count()
            if "combined" in r.reports
            else None
        )
        out[proto] = (a, b, eng)
        print(
            f"  {proto:14s} A_err {a:.4f}  B_err {b:.4f}  engaged {eng}  ({time.time()-t0:.0f}s)",
            flush=True,
        )
    base_a = out["PRETRAIN"][0]
    ume_deg = out["UME"][0] - base_a
    nofreeze_deg = out["UME_NOFREEZE"][0] - base_a
    ok1 = out["UME"][1] <= out["PRETRAIN"][1]
    ok2 = ume_deg < nofreeze_deg
    ok3 = out["UME"][2] >= out["UME_NOBALANCE"][2]
    print(f"  => UME_B<=dense_B: {ok1} | deg {ume_deg:.4f} < {nofreeze_deg:.4f}: {ok2} | engage {out['UME'][2]}>={out['UME_NOBALANCE'][2]}: {ok3}")
    return ok1 and ok2 and ok3


if __name__ == "__main__":
    tag = sys.argv[1]
    kw = {}
    for arg in sys.argv[2:]:
        k, v = arg.split("=")
        kw[k] = float(v) if "." in v else int(v)
    run(tag, **kw)
