"""
Meta-learning a van der Pol family
==================================

Twenty source oscillators with random damping are used to meta-train a
Case I NSSM (input-output data only). The meta-trained weights are then
adapted online on the first 400 samples of a new oscillator and used to
predict the rest. For comparison the script also trains a universal model
on the sources and a model on the target context alone.

This is the small version of the study behind the acceptance suite; it
takes a couple of minutes. Run with ``python3 demos/vdp_meta_learning.py``.
"""
from metassm import experiments

settings = {"n_sources": 20, "meta": {"epochs": 20}, "universal_epochs": 30}
out = experiments.vdp_ordering(seed=0, settings=settings)

print("validation loss during meta-training: %.3g -> %.3g" % tuple(out["val_loss"]))
print("\ntest SSE on the target after the 400-sample context")
for key, label in [("maml", "MAML, adapted"), ("maml_unadapted", "MAML, not adapted"),
                   ("xfer", "universal then adapted (Xfer)"), ("all_noadapt", "universal incl. context"),
                   ("ssm", "target context only")]:
    print(f"  {label:32s} {out[key]:10.4g}")
print("\nadaptation changed the MAML error by a factor %.2f" % (out["maml"] / out["maml_unadapted"]))
print("elapsed %.0f s" % out["seconds"])
