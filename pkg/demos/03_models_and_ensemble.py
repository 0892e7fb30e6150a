# The two backbones, the two heads, and probability averaging.
import numpy as np

from agegender.models import Ensemble, build_attention_net, build_resnet_lite, forward_multitask

attn = build_attention_net()
res = build_resnet_lite()
print("attention net params", attn.num_parameters())
print("resnet-lite params  ", res.num_parameters())

images = np.random.default_rng(2).random((3, 3, 64, 64)).astype(np.float32)
out = attn(images)
print("embedding", out.embedding.dims, "gender logits", out.gender_logits.dims, "age logits", out.age_logits.dims)

pred = forward_multitask(attn, images)
print("gender probs\n", pred.gender_probs.round(3))
print("age bucket argmax", pred.age_buckets)

# the age head sees [embedding, gender probabilities]
print("age hidden layer input width", attn.spec.age_head_in, "=", attn.spec.embedding_dim, "+ 2")

ens = Ensemble([attn, res])
members = ens.member_predictions(images)
mean = ens.predict(images)
print("ensemble == member mean:", np.allclose(mean.age_probs, (members[0].age_probs + members[1].age_probs) / 2))
