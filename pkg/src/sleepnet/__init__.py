"""sleepnet - sleep-quality modelling, recommendation and explanation from diaries."""
