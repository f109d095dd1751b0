"""
Learning a normalization
========================

A small permutation-invariant network predicts per-view scales and a
rotation from the 8 points.  It is trained without labels, on the
epipolar loss of its own estimate, and starts exactly at Hartley.
A short run; the CLI default is 5000 samples x 30 epochs.
"""

from epinorm import net, synth

train = synth.make_samples(synth.SceneConfig(), 1500, seed=100)
held = synth.make_samples(synth.SceneConfig(), 500, seed=200)

w0 = net.init_weights()
print("untrained better rate:", net.evaluate(w0, held).better_rate)

w, log = net.train(train, net.TrainConfig(epochs=6),
                   progress=lambda e, lr, loss: print(f"epoch {e}  lr {lr:.2e}  loss {loss:.4f}"))
print("hartley loss on train:", round(log.hartley_loss, 4), " best epoch:", log.best_epoch)

res = net.evaluate(w, held)
print(f"held-out better rate {res.better_rate:.1f}%  mean loss {res.loss_net.mean():.4f}"
      f" vs hartley {res.loss_hartley.mean():.4f}")

gen = net.evaluate(w, synth.make_samples(synth.SceneConfig(motion="general"), 500, seed=300))
print(f"general-motion better rate {gen.better_rate:.1f}%")

p1, p2 = net.forward(w, *held[0][:2])
print("predicted view 1:", p1)
