"""Trust-aware path selection for onion routing.

Submodules: ``netmap`` (locations, entities, virtual links), ``relays``
(consensus snapshots, family uptime), ``trust`` (trust policies and
adversaries), ``cluster``, ``pathsel`` (TrustAll / TrustOne / vanilla),
``simulate`` (Monte Carlo engine), ``attacks`` and ``cli``.
"""

__version__ = "0.1.0"
