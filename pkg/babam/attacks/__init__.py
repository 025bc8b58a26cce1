"""Attacker side: trigger patches and hidden clean-label poisons."""
