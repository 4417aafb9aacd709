"""Dialogue policy learning with a dense next-action-prediction reward.

Submodules: ``nn`` (numpy MLPs and Adam), ``acts`` and ``ontology`` (dialogue
acts, schema, goals), ``usersim`` and ``env`` (agenda-based user and the RL
environment), ``expert`` (scripted demonstrations), ``discriminator`` and
``reward`` (the learned local reward), ``policy``, ``ppo`` and ``dqn``
(learners), ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
